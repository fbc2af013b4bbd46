import json

import numpy as np
import pytest

from daattack.analysis import (
    DEFAULT_GRIDS,
    AdversarialSet,
    TransferReport,
    merge_csv,
    parse_csv,
    perturbation_cosine,
    ratio_metric,
    success_rate,
    surviving_ids,
    sweep,
)
from daattack.attacks import attack_config, run_attack
from daattack.data import gen_blobs
from daattack.errors import ConfigError, DataFormatError
from daattack.nets import TrainConfig, build_arch, train


class FixedPred:
    """Target stub that returns canned labels regardless of input."""

    def __init__(self, out):
        self.out = np.asarray(out)

    def predict(self, x):
        assert len(x) == len(self.out)
        return self.out


def _make_set(x_star, x, y, ids=None, source="src", eps=0.5):
    x_star = np.asarray(x_star, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if ids is None:
        ids = np.arange(len(y))
    return AdversarialSet(
        x_star=x_star, x=x, y=y, example_ids=np.asarray(ids),
        source_id=source, config={"epsilon": eps},
    )


# -- AdversarialSet -------------------------------------------------------------


def test_set_rejects_budget_violation():
    x = np.full((2, 1, 2, 2), 0.5)
    x_star = x.copy()
    x_star[0, 0, 0, 0] += 0.3
    with pytest.raises(ConfigError, match="budget"):
        _make_set(x_star, x, [0, 1], eps=0.1)


def test_set_rejects_range_violation():
    x = np.full((1, 1, 2, 2), 0.5)
    with pytest.raises(ConfigError, match=r"\[0, 1\]"):
        _make_set(x + 0.6, x, [0], eps=0.7)


def test_set_rejects_empty():
    x = np.zeros((0, 1, 2, 2))
    with pytest.raises(ConfigError, match="empty"):
        _make_set(x, x, [])


# -- success_rate / survivors ---------------------------------------------------


def test_success_rate_three_of_four():
    x = np.full((4, 1, 2, 2), 0.5)
    s = _make_set(x, x, [0, 0, 0, 0])
    target = FixedPred([1, 1, 1, 0])  # 3 of 4 flipped
    assert success_rate(target, s) == 75.0


def test_success_rate_zero_on_clean_correct():
    x = np.full((5, 1, 2, 2), 0.5)
    s = _make_set(x, x, [2, 2, 2, 2, 2])
    assert success_rate(FixedPred([2] * 5), s) == 0.0


def test_success_rate_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.3, 0.7, (20, 1, 3, 3))
    d = rng.uniform(-0.1, 0.1, x.shape)
    s = _make_set(np.clip(x + d, 0, 1), x, rng.integers(0, 3, 20))
    pred = rng.integers(0, 3, 20)
    expect = 100.0 * sum(int(p != t) for p, t in zip(pred, s.y)) / 20
    assert success_rate(FixedPred(pred), s) == expect


def test_surviving_ids():
    x = np.full((4, 1, 2, 2), 0.5)
    s = _make_set(x, x, [0, 1, 0, 1], ids=[10, 11, 12, 13])
    assert surviving_ids(FixedPred([0, 0, 1, 1]), s) == {10, 13}


# -- ratio_metric ---------------------------------------------------------------


def test_ratio_containment_is_one():
    assert ratio_metric([{1, 2}, {3}], {1, 2, 3, 4}) == 1.0


def test_ratio_disjoint_is_zero():
    assert ratio_metric([{1, 2}], {5, 6}) == 0.0


def test_ratio_empty_union_undefined():
    assert ratio_metric([set(), set()], {1}) is None


def test_ratio_matches_set_oracle():
    rng = np.random.default_rng(3)
    for _ in range(25):
        normal = [set(rng.integers(0, 20, rng.integers(0, 12)).tolist())
                  for _ in range(3)]
        robust = set(rng.integers(0, 20, 10).tolist())
        union = normal[0] | normal[1] | normal[2]
        got = ratio_metric(normal, robust)
        if not union:
            assert got is None
        else:
            assert got == len(union & robust) / len(union)


# -- perturbation_cosine --------------------------------------------------------


def _pair_sets(da, db, ids_a=None, ids_b=None):
    na, nb = len(da), len(db)
    xa = np.full((na,) + da.shape[1:], 0.5)
    xb = np.full((nb,) + db.shape[1:], 0.5)
    sa = _make_set(xa + da, xa, [0] * na, ids=ids_a, source="a")
    sb = _make_set(xb + db, xb, [0] * nb, ids=ids_b, source="b")
    return {"a": sa, "b": sb}


def test_cosine_identical_sets_all_ones():
    d = np.random.default_rng(1).uniform(-0.2, 0.2, (6, 1, 2, 2))
    res = perturbation_cosine(_pair_sets(d, d.copy()))
    assert np.allclose(res.matrix, 1.0)
    assert res.skipped == 0 and res.n_shared == 6


def test_cosine_antipodal_is_minus_one():
    d = np.random.default_rng(2).uniform(0.05, 0.2, (4, 1, 2, 2))
    res = perturbation_cosine(_pair_sets(d, -d))
    assert res.matrix[0, 1] == pytest.approx(-1.0, abs=1e-12)


def test_cosine_matches_hand_formula_dim3():
    rng = np.random.default_rng(4)
    da = rng.uniform(-0.3, 0.3, (5, 1, 1, 3))
    db = rng.uniform(-0.3, 0.3, (5, 1, 1, 3))
    res = perturbation_cosine(_pair_sets(da, db))
    byhand = np.mean([
        float(a.ravel() @ b.ravel())
        / (np.linalg.norm(a.ravel()) * np.linalg.norm(b.ravel()))
        for a, b in zip(da, db)
    ])
    assert res.matrix[0, 1] == pytest.approx(byhand, abs=1e-14)
    assert res.matrix[1, 0] == res.matrix[0, 1]
    assert res.matrix[0, 0] == 1.0 and res.matrix[1, 1] == 1.0


def test_cosine_skips_and_counts_zero_perturbations():
    da = np.full((3, 1, 1, 2), 0.1)
    db = np.full((3, 1, 1, 2), 0.1)
    da[1] = 0.0  # example 1 contributes no direction on source a
    res = perturbation_cosine(_pair_sets(da, db))
    assert res.skipped == 1
    assert res.matrix[0, 1] == pytest.approx(1.0)


def test_cosine_all_zero_pair_raises():
    da = np.zeros((2, 1, 1, 2))
    with pytest.raises(ConfigError, match="zero perturbation"):
        perturbation_cosine(_pair_sets(da, da))


def test_cosine_aligns_on_shared_ids():
    d = np.array([0.1, 0.2, 0.3]).reshape(3, 1, 1, 1)
    sets = _pair_sets(d, d[::-1].copy(), ids_a=[0, 1, 2], ids_b=[2, 1, 0])
    res = perturbation_cosine(sets)  # same (id, delta) pairs, permuted rows
    assert res.matrix[0, 1] == pytest.approx(1.0)
    assert res.n_shared == 3


def test_cosine_restrict_to_subset():
    da = np.array([0.1, 0.1]).reshape(2, 1, 1, 1)
    db = np.array([0.1, -0.1]).reshape(2, 1, 1, 1)
    full = perturbation_cosine(_pair_sets(da, db))
    sub = perturbation_cosine(_pair_sets(da, db), restrict_to={0})
    assert full.matrix[0, 1] == pytest.approx(0.0)
    assert sub.matrix[0, 1] == pytest.approx(1.0)


def test_cosine_requires_two_sets():
    d = np.full((2, 1, 1, 2), 0.1)
    s = _pair_sets(d, d)
    with pytest.raises(ConfigError, match="two"):
        perturbation_cosine({"a": s["a"]})


def test_cosine_mean_offdiagonal():
    da = np.array([0.1]).reshape(1, 1, 1, 1)
    res = perturbation_cosine(_pair_sets(da, -da))
    assert res.mean_offdiagonal() == pytest.approx(-1.0)


# -- sweep ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_zoo():
    ds = gen_blobs(60, h=8, seed=21)
    zoo = {
        "m0": train(build_arch("mlp", 8, 2), ds,
                    TrainConfig(lr=0.5, epochs=10, batch_size=16, seed=5)),
        "m1": train(build_arch("shallow", 8, 2), ds,
                    TrainConfig(lr=0.3, epochs=10, batch_size=16, seed=6)),
    }
    return ds, zoo


def test_sweep_single_point_equals_plain_eval(small_zoo):
    ds, zoo = small_zoo
    x, y = ds.images[:12], ds.labels[:12]
    base = attack_config("da-i-fgsm", epsilon=0.1, iters=4, aggregate=3,
                         sigma=0.05, seed=11)
    curves = sweep("N", [3], base, zoo, x, y, sources=["m0"])
    direct = run_attack(zoo["m0"], x, y, base, source_id="m0")
    adv = AdversarialSet.from_result(direct)
    for tid in zoo:
        assert curves["curves"]["m0"][tid] == [success_rate(zoo[tid], adv)]
    assert curves["draws"] == [4]


def test_sweep_reproducible_bit_exact(small_zoo):
    ds, zoo = small_zoo
    x, y = ds.images[:10], ds.labels[:10]
    base = attack_config("da-i-fgsm", epsilon=0.1, iters=3, sigma=0.05, seed=3)
    a = sweep("N", [1, 4], base, zoo, x, y, sources=["m0", "m1"])
    b = sweep("N", [1, 4], base, zoo, x, y, sources=["m0", "m1"])
    assert a == b


def test_sweep_sigma_zero_point_matches_baseline(small_zoo):
    # at sigma=0 every noise draw is the clean point, so the aggregated
    # direction collapses to the plain sign gradient (momentum-free preset)
    ds, zoo = small_zoo
    x, y = ds.images[:12], ds.labels[:12]
    base = attack_config("da-i-fgsm", epsilon=0.1, iters=4, seed=9)
    curves = sweep("sigma", [0.0, 0.05], base, zoo, x, y, sources=["m0"])
    plain = run_attack(zoo["m0"], x, y,
                       attack_config("i-fgsm", epsilon=0.1, iters=4, seed=9))
    adv = AdversarialSet.from_result(plain)
    for tid in zoo:
        assert curves["curves"]["m0"][tid][0] == success_rate(zoo[tid], adv)


def test_sweep_rejects_unknown_parameter(small_zoo):
    ds, zoo = small_zoo
    base = attack_config("i-fgsm")
    with pytest.raises(ConfigError, match="unknown sweep parameter"):
        sweep("beta", [1], base, zoo, ds.images[:4], ds.labels[:4])
    with pytest.raises(ConfigError, match="empty"):
        sweep("N", [], base, zoo, ds.images[:4], ds.labels[:4])


def test_default_grids_cover_spec_ranges():
    assert DEFAULT_GRIDS["N"][0] == 10 and DEFAULT_GRIDS["N"][-1] == 50
    assert DEFAULT_GRIDS["sigma"][0] == 0.0 and DEFAULT_GRIDS["sigma"][-1] == 0.09
    assert DEFAULT_GRIDS["epsilon"][0] == 10 / 255
    assert DEFAULT_GRIDS["epsilon"][-1] == 16 / 255
    assert DEFAULT_GRIDS["T"][0] == 5 and DEFAULT_GRIDS["T"][-1] == 22
    assert DEFAULT_GRIDS["alpha"][0] == pytest.approx(1 / 255)
    assert DEFAULT_GRIDS["alpha"][-1] == pytest.approx(2 / 255)


# -- report formats -------------------------------------------------------------


def _row(attack="i-fgsm", source="a", target="b", rate=50.0, m=10, seed=1,
         white_box=False):
    return {"attack": attack, "source": source, "target": target,
            "success_rate": rate, "M": m, "seed": seed,
            "white_box": white_box}


def test_report_roundtrip_csv():
    rep = TransferReport(
        rows=[_row(), _row(target="c", rate=12.5)],
        meta={"dataset_sha": "abc", "config_sha": "def", "seed": 1},
    )
    text = rep.to_csv()
    meta, rows = parse_csv(text)
    assert meta["schema"] == "1"
    assert meta["dataset_sha"] == "abc"
    assert [r["target"] for r in rows] == ["b", "c"]
    assert rows[1]["success_rate"] == 12.5


def test_report_validates_rows():
    with pytest.raises(ConfigError, match="success_rate"):
        TransferReport(rows=[_row(rate=101.0)], meta={})
    with pytest.raises(ConfigError, match="M"):
        TransferReport(rows=[_row(m=0)], meta={})


def test_empty_report_is_valid():
    text = TransferReport(rows=[], meta={"dataset_sha": "x"}).to_csv()
    meta, rows = parse_csv(text)
    assert rows == [] and meta["schema"] == "1"


def test_report_json_has_schema_and_sorted_keys():
    rep = TransferReport(rows=[_row()], meta={"dataset_sha": "abc"},
                         sweeps=[{"parameter": "N"}], similarity={"ids": []})
    doc = json.loads(rep.to_json())
    assert doc["schema"] == 1
    assert list(doc) == sorted(doc)
    assert doc["rows"][0]["white_box"] is False


def test_merge_union_dedupe_and_sort():
    a = TransferReport(rows=[_row(attack="mi-fgsm"), _row(attack="fgsm")],
                       meta={"dataset_sha": "h1"}).to_csv()
    b = TransferReport(rows=[_row(attack="fgsm"), _row(attack="i-fgsm")],
                       meta={"dataset_sha": "h1"}).to_csv()
    merged = merge_csv([a, b])
    _, rows = parse_csv(merged)
    assert [r["attack"] for r in rows] == ["fgsm", "i-fgsm", "mi-fgsm"]
    assert len(rows) == 3  # duplicate fgsm row collapsed


def test_merge_stable_within_equal_keys():
    a = TransferReport(rows=[_row(seed=1), _row(seed=2)],
                       meta={"dataset_sha": "h1"}).to_csv()
    merged = merge_csv([a])
    _, rows = parse_csv(merged)
    assert [r["seed"] for r in rows] == [1, 2]


def test_merge_refuses_mixed_schema():
    a = TransferReport(rows=[], meta={"dataset_sha": "h1"}).to_csv()
    b = a.replace("# schema=1", "# schema=2")
    with pytest.raises(DataFormatError, match="schema"):
        merge_csv([a, b])


def test_merge_refuses_mismatched_dataset():
    a = TransferReport(rows=[], meta={"dataset_sha": "h1"}).to_csv()
    b = TransferReport(rows=[], meta={"dataset_sha": "h2"}).to_csv()
    with pytest.raises(DataFormatError, match="dataset"):
        merge_csv([a, b])


def test_parse_rejects_bad_header():
    with pytest.raises(DataFormatError, match="header"):
        parse_csv("attack,source\n")
