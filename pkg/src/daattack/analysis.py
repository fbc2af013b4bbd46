"""Evaluation metrics and experiment procedures.

Success rates, the normal-vs-robust survivor ratio, pairwise perturbation
cosine similarity, hyper-parameter sweeps, and the versioned CSV/JSON report
formats the harness emits and merges.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, run_attack
from .errors import ConfigError, DataFormatError

REPORT_SCHEMA = 1

# desk-scale default grids; endpoints chosen to bracket the interesting range
DEFAULT_GRIDS = {
    "N": [10, 20, 30, 40, 50],
    "sigma": [i / 100 for i in range(10)],
    "epsilon": [i / 255 for i in range(10, 17)],
    "T": [5, 8, 11, 14, 17, 20, 22],
    "alpha": [16 / (255 * t) for t in (16, 14, 12, 10, 8)],
}

_SWEEP_FIELD = {
    "N": "aggregate",
    "sigma": "sigma",
    "epsilon": "epsilon",
    "T": "iters",
    "alpha": "alpha",
}


@dataclass(frozen=True)
class AdversarialSet:
    """A crafted set D*: adversarial images plus their clean originals.

    Validates the L-inf budget against the epsilon echoed in `config`, so a
    set that violates the ball cannot be constructed.
    """

    x_star: np.ndarray
    x: np.ndarray
    y: np.ndarray
    example_ids: np.ndarray
    source_id: str
    config: dict

    def __post_init__(self):
        if self.x_star.shape != self.x.shape:
            raise ConfigError(
                f"x_star shape {self.x_star.shape} != x shape {self.x.shape}"
            )
        m = len(self.x_star)
        if len(self.y) != m or len(self.example_ids) != m:
            raise ConfigError("y/example_ids length mismatch")
        if m == 0:
            raise ConfigError("empty adversarial set")
        eps = float(self.config["epsilon"])
        overshoot = float(np.max(np.abs(self.x_star - self.x)))
        if overshoot > eps + 1e-9:
            raise ConfigError(
                f"budget violation: |delta|_inf = {overshoot} > {eps} + 1e-9"
            )
        if self.x_star.min() < 0.0 or self.x_star.max() > 1.0:
            raise ConfigError("x_star leaves [0, 1]")

    @classmethod
    def from_result(cls, result):
        return cls(
            x_star=result.x_star,
            x=result.x,
            y=result.y,
            example_ids=result.example_ids,
            source_id=result.source_id,
            config=result.config.to_dict(),
        )

    def __len__(self):
        return len(self.x_star)

    @property
    def perturbation(self):
        return self.x_star - self.x


def success_rate(target, adv_set):
    """Percent of D* misclassified by `target` (Eq. of the attack-success

    definition: 100 * #{argmax f(x*) != y} / M).
    """
    if len(adv_set) == 0:
        raise ConfigError("success_rate of an empty set is undefined")
    pred = target.predict(adv_set.x_star)
    return 100.0 * float(np.mean(pred != adv_set.y))


def surviving_ids(target, adv_set):
    """Example ids in D* the target still classifies correctly."""
    pred = target.predict(adv_set.x_star)
    return frozenset(int(i) for i in adv_set.example_ids[pred == adv_set.y])


def ratio_metric(normal_sets, robust_set):
    """|(union of normal survivors) intersect robust survivors| / |union|.

    Returns None when the union is empty (the ratio is undefined then;
    callers report it as such rather than inventing a number).
    """
    union = set()
    for s in normal_sets:
        union |= set(s)
    if not union:
        return None
    return len(union & set(robust_set)) / len(union)


@dataclass(frozen=True)
class CosineMatrix:
    source_ids: tuple
    matrix: np.ndarray
    n_shared: int
    skipped: int  # (pair, example) combinations dropped for a zero delta

    def mean_offdiagonal(self):
        k = len(self.source_ids)
        if k < 2:
            raise ConfigError("need at least two sources for a pairwise mean")
        iu = np.triu_indices(k, 1)
        return float(np.mean(self.matrix[iu]))

    def to_json_dict(self):
        return {
            "source_ids": list(self.source_ids),
            "matrix": [[float(v) for v in row] for row in self.matrix],
            "n_shared": self.n_shared,
            "skipped": self.skipped,
        }


def perturbation_cosine(sets, restrict_to=None):
    """Pairwise mean cosine similarity of perturbations across source models.

    `sets` is an ordered mapping {source_id: AdversarialSet}; sets are aligned
    on the intersection of their example ids (they must share the underlying
    clean examples). Examples with a zero perturbation on either side of a
    pair are skipped and counted. `restrict_to` optionally narrows the
    averaging to a set of example ids (e.g. only examples successful on both
    sources); the default averages over all shared examples.
    """
    ids = list(sets)
    if len(ids) < 2:
        raise ConfigError("need at least two adversarial sets")
    shared = None
    for s in sets.values():
        cur = set(int(i) for i in s.example_ids)
        shared = cur if shared is None else shared & cur
    if restrict_to is not None:
        shared &= set(int(i) for i in restrict_to)
    if not shared:
        raise ConfigError("no shared examples between adversarial sets")
    order = np.array(sorted(shared))
    n = len(order)

    deltas = {}
    for sid, s in sets.items():
        pos = {int(e): j for j, e in enumerate(s.example_ids)}
        rows = np.array([pos[e] for e in order])
        deltas[sid] = s.perturbation[rows].reshape(n, -1)

    k = len(ids)
    matrix = np.ones((k, k))
    skipped = 0
    for a in range(k):
        for b in range(a + 1, k):
            da, db = deltas[ids[a]], deltas[ids[b]]
            na = np.sqrt(np.sum(da * da, axis=1))
            nb = np.sqrt(np.sum(db * db, axis=1))
            ok = (na > 0) & (nb > 0)
            skipped += int(np.sum(~ok))
            if not np.any(ok):
                raise ConfigError(
                    f"all shared examples have a zero perturbation for "
                    f"pair ({ids[a]}, {ids[b]})"
                )
            cos = np.sum(da[ok] * db[ok], axis=1) / (na[ok] * nb[ok])
            matrix[a, b] = matrix[b, a] = float(np.mean(cos))
    return CosineMatrix(tuple(ids), matrix, n, skipped)


def sweep(parameter, grid, base, zoo, x, y, *, sources=None, example_ids=None,
          workers=1, seed_tag=None):
    """Regenerate D* per grid value per source and evaluate on every target.

    `parameter` is one of N/sigma/epsilon/T/alpha; N counts noise draws minus
    one (the engine draws N+1 samples, reported in the `draws` list). The
    base config should leave alpha unset for the epsilon/T sweeps so the
    step size follows epsilon/T; an explicitly set alpha is never rederived.
    Returns a JSON-ready dict of curves keyed source -> target -> [rate].
    """
    if parameter not in _SWEEP_FIELD:
        raise ConfigError(
            f"unknown sweep parameter {parameter!r}, have {sorted(_SWEEP_FIELD)}"
        )
    grid = list(grid)
    if not grid:
        raise ConfigError("empty sweep grid")
    if sources is None:
        sources = list(zoo)
    fieldname = _SWEEP_FIELD[parameter]
    curves = {sid: {tid: [] for tid in zoo} for sid in sources}
    for value in grid:
        overrides = dict(base.to_dict())
        overrides[fieldname] = value
        cfg = AttackConfig.from_dict(overrides)
        for sid in sources:
            result = run_attack(zoo[sid], x, y, cfg, example_ids=example_ids,
                                workers=workers, source_id=sid)
            adv = AdversarialSet.from_result(result)
            for tid, target in zoo.items():
                curves[sid][tid].append(success_rate(target, adv))
    out = {
        "parameter": parameter,
        "grid": [float(v) if parameter != "N" else int(v) for v in grid],
        "curves": curves,
    }
    if parameter == "N":
        out["draws"] = [int(v) + 1 for v in grid]
    if seed_tag is not None:
        out["seed"] = seed_tag
    return out


# -- report formats -------------------------------------------------------------

_CSV_COLUMNS = ["attack", "source", "target", "success_rate", "M", "seed"]


@dataclass
class TransferReport:
    """Rows of per-(attack, source, target) success plus bundled extras.

    Rows are dicts with the CSV columns plus a white_box flag (JSON only;
    the CSV column set is fixed). meta carries schema, dataset hash, config
    hash, and seed so merges can refuse incompatible inputs.
    """

    rows: list
    meta: dict
    sweeps: list = field(default_factory=list)
    similarity: dict = field(default_factory=dict)

    def __post_init__(self):
        self.meta.setdefault("schema", REPORT_SCHEMA)
        for row in self.rows:
            if not (0.0 <= row["success_rate"] <= 100.0):
                raise ConfigError(f"success_rate out of range: {row}")
            if row["M"] <= 0:
                raise ConfigError(f"non-positive M: {row}")

    def to_csv(self):
        buf = io.StringIO()
        for key in ("schema", "dataset_sha", "config_sha"):
            if key in self.meta:
                buf.write(f"# {key}={self.meta[key]}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        for row in self.rows:
            writer.writerow([
                row["attack"], row["source"], row["target"],
                repr(float(row["success_rate"])), row["M"], row["seed"],
            ])
        return buf.getvalue()

    def to_json(self):
        doc = {
            "schema": self.meta["schema"],
            "meta": {k: v for k, v in self.meta.items() if k != "schema"},
            "rows": self.rows,
            "sweeps": self.sweeps,
            "similarity": self.similarity,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def parse_csv(text):
    """Read a report CSV back into (meta, rows)."""
    meta = {}
    lines = text.splitlines()
    body_start = 0
    for line in lines:
        if not line.startswith("#"):
            break
        body_start += 1
        key, _, value = line[1:].strip().partition("=")
        meta[key] = value
    body = lines[body_start:]
    if not body or body[0].split(",") != _CSV_COLUMNS:
        raise DataFormatError(
            f"bad or missing CSV header, expected {','.join(_CSV_COLUMNS)}"
        )
    rows = []
    for rec in csv.reader(body[1:]):
        if not rec:
            continue
        if len(rec) != len(_CSV_COLUMNS):
            raise DataFormatError(f"row has {len(rec)} fields: {rec!r}")
        rows.append({
            "attack": rec[0], "source": rec[1], "target": rec[2],
            "success_rate": float(rec[3]), "M": int(rec[4]),
            "seed": int(rec[5]),
        })
    return meta, rows


def merge_csv(texts):
    """Union rows of several report CSVs into one.

    Refuses mixed schema versions and mismatched dataset hashes. Exact
    duplicate rows collapse; the union is stable-sorted by
    (attack, source, target).
    """
    if not texts:
        raise ConfigError("nothing to merge")
    parsed = [parse_csv(t) for t in texts]
    schemas = {m.get("schema", "") for m, _ in parsed}
    if len(schemas) > 1:
        raise DataFormatError(f"mixed schema versions: {sorted(schemas)}")
    hashes = {m.get("dataset_sha", "") for m, _ in parsed}
    if len(hashes) > 1:
        raise DataFormatError(f"mismatched dataset hashes: {sorted(hashes)}")
    merged, seen = [], set()
    for _, rows in parsed:
        for row in rows:
            key = tuple(sorted(row.items()))
            if key not in seen:
                seen.add(key)
                merged.append(row)
    merged.sort(key=lambda r: (r["attack"], r["source"], r["target"]))
    meta = dict(parsed[0][0])
    if len({m.get("config_sha", "") for m, _ in parsed}) > 1:
        meta.pop("config_sha", None)  # a merged file spanning configs
    report = TransferReport(rows=merged, meta=meta)
    return report.to_csv()
