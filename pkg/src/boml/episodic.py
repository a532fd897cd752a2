"""Few-shot episodes, synthetic shifted-domain streams and image ingestion."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import InputError


class CapacityError(ValueError):
    """Not enough classes or examples for the requested sampling."""


class IngestionError(IOError):
    """An image file could not be decoded."""


def make_rng(*seed) -> np.random.Generator:
    """Generator from a tuple of non-negative ints (order matters)."""
    return np.random.default_rng(np.random.SeedSequence([int(s) for s in seed]))


@dataclass(frozen=True)
class DatasetSource:
    """Labeled examples grouped by class, split into base and novel pools."""

    name: str
    examples: dict  # class id -> (n_examples, feature_dim) array
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]

    def __post_init__(self):
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise InputError(f"base and novel classes overlap: {sorted(overlap)}")
        for c in (*self.base_classes, *self.novel_classes):
            if c not in self.examples:
                raise InputError(f"class {c} has no example store")

    @property
    def feature_dim(self) -> int:
        return next(iter(self.examples.values())).shape[1]

    def classes(self, split: str) -> tuple[int, ...]:
        if split == "base":
            return self.base_classes
        if split == "novel":
            return self.novel_classes
        raise InputError(f"unknown split {split!r}")

    def restricted(self, base_classes: Sequence[int], name: str | None = None) -> "DatasetSource":
        """Same store, with the base pool narrowed to ``base_classes``."""
        return replace(self, name=name or self.name, base_classes=tuple(base_classes))

    @property
    def nbytes(self) -> int:
        return int(sum(self.examples[c].nbytes for c in (*self.base_classes, *self.novel_classes)))


@dataclass(frozen=True)
class EpisodicTask:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    n_way: int
    k_shot: int
    q_per_class: int
    # (global class id, example index) of every row, for bookkeeping
    support_ids: tuple = field(default=(), repr=False)
    query_ids: tuple = field(default=(), repr=False)

    @property
    def support(self):
        return list(zip(self.support_x, self.support_y))

    @property
    def query(self):
        return list(zip(self.query_x, self.query_y))

    @property
    def nbytes(self) -> int:
        return int(self.support_x.nbytes + self.query_x.nbytes + self.support_y.nbytes + self.query_y.nbytes)


def sample_task(
    src: DatasetSource,
    split: str,
    n_way: int,
    k_shot: int,
    q_per_class: int,
    rng_seed,
) -> EpisodicTask:
    """Draw an N-way K-shot task; labels are shuffled per episode."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else make_rng(*np.atleast_1d(rng_seed))
    pool = src.classes(split)
    need = k_shot + q_per_class
    eligible = [c for c in pool if src.examples[c].shape[0] >= need]
    if len(eligible) < n_way:
        raise CapacityError(
            f"{src.name}/{split}: need {n_way} classes with >= {need} examples, have {len(eligible)}"
        )
    chosen = rng.choice(len(eligible), size=n_way, replace=False)
    labels = rng.permutation(n_way)
    sx, sy, qx, qy, sid, qid = [], [], [], [], [], []
    for ci, lab in zip(chosen, labels):
        c = eligible[ci]
        store = src.examples[c]
        idx = rng.permutation(store.shape[0])[:need]
        s_idx, q_idx = idx[:k_shot], idx[k_shot:]
        sx.append(store[s_idx])
        qx.append(store[q_idx])
        sy.append(np.full(k_shot, lab))
        qy.append(np.full(q_per_class, lab))
        sid.extend((c, int(i)) for i in s_idx)
        qid.extend((c, int(i)) for i in q_idx)
    return EpisodicTask(
        np.concatenate(sx), np.concatenate(sy), np.concatenate(qx), np.concatenate(qy),
        n_way, k_shot, q_per_class, tuple(sid), tuple(qid),
    )


# ------------------------------------------------------------------ streams

@dataclass(frozen=True)
class TaskStream:
    """Ordered meta-training sources plus the pools used for meta-evaluation.

    ``mode == "datasets"``: one source per knowledge domain, each evaluated
    on its own novel classes.  ``mode == "tasks"``: one source whose base
    classes are partitioned into groups; all groups share a single novel
    pool for evaluation.
    """

    mode: str
    datasets: tuple[DatasetSource, ...]
    eval_sources: tuple[DatasetSource, ...]

    def __len__(self):
        return len(self.datasets)


@dataclass(frozen=True)
class DomainSpec:
    prototype_scale: float = 1.0  # spread of class prototypes in the informative subspace
    dispersion: float = 0.3  # within-class spread (0 -> every example equals its prototype)
    noise_scale: float = 3.0  # nuisance spread outside the informative subspace, relative to dispersion
    rotation_seed: int = 0


@dataclass(frozen=True)
class SyntheticShiftConfig:
    n_domains: int = 2
    classes_per_domain: int = 30
    novel_classes: int = 10
    examples_per_class: int = 20
    feature_dim: int = 16
    informative_dims: int = 4
    rotation: str = "disjoint"  # or "random"
    share_prototypes: bool = False
    domains: tuple[DomainSpec, ...] = ()

    def domain(self, d: int) -> DomainSpec:
        if self.domains:
            return self.domains[d]
        return DomainSpec(rotation_seed=d)

    def validate(self) -> None:
        if self.n_domains < 1:
            raise InputError("n_domains must be >= 1")
        if self.classes_per_domain < 1 or self.examples_per_class < 1:
            raise InputError("need at least one class and one example per class")
        if not 0 <= self.novel_classes < self.classes_per_domain:
            raise InputError("novel_classes must leave at least one base class")
        if not 1 <= self.informative_dims <= self.feature_dim:
            raise InputError("informative_dims must lie in 1..feature_dim")
        if self.domains and len(self.domains) != self.n_domains:
            raise InputError(f"{len(self.domains)} domain specs for {self.n_domains} domains")
        if self.rotation not in ("disjoint", "random"):
            raise InputError(f"unknown rotation mode {self.rotation!r}")
        if self.rotation == "disjoint" and self.n_domains * self.informative_dims > self.feature_dim:
            raise InputError("disjoint rotations need n_domains * informative_dims <= feature_dim")
        for d in range(self.n_domains):
            spec = self.domain(d)
            if spec.noise_scale <= 0:
                raise InputError("noise_scale must be > 0")
            if spec.dispersion < 0 or spec.prototype_scale < 0:
                raise InputError("dispersion and prototype_scale must be >= 0")


def _haar_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def domain_rotation(cfg: SyntheticShiftConfig, d: int, seed: int) -> np.ndarray:
    """Orthogonal map from latent to feature space for domain ``d``.

    The first ``informative_dims`` columns span the subspace carrying class
    identity.  In ``disjoint`` mode all domains share one base rotation and
    take consecutive, mutually orthogonal column blocks as that subspace.
    """
    spec = cfg.domain(d)
    if cfg.rotation == "random":
        return _haar_rotation(cfg.feature_dim, make_rng(seed, 1, spec.rotation_seed))
    base = _haar_rotation(cfg.feature_dim, make_rng(seed, 2))
    r = cfg.informative_dims
    cols = list(range(d * r, (d + 1) * r))
    cols += [c for c in range(cfg.feature_dim) if c not in cols]
    return base[:, cols]


def make_domain(cfg: SyntheticShiftConfig, d: int, seed: int) -> DatasetSource:
    spec = cfg.domain(d)
    rot = domain_rotation(cfg, d, seed)
    r, dim = cfg.informative_dims, cfg.feature_dim
    proto_rng = make_rng(seed, 3) if cfg.share_prototypes else make_rng(seed, 4, d)
    protos = proto_rng.standard_normal((cfg.classes_per_domain, r)) * spec.prototype_scale
    noise_rng = make_rng(seed, 5, d)
    sd = np.full(dim, spec.dispersion * spec.noise_scale)
    sd[:r] = spec.dispersion
    examples = {}
    for c in range(cfg.classes_per_domain):
        latent = np.zeros((cfg.examples_per_class, dim))
        latent[:, :r] = protos[c]
        latent += noise_rng.standard_normal((cfg.examples_per_class, dim)) * sd
        examples[c] = latent @ rot.T
    n_base = cfg.classes_per_domain - cfg.novel_classes
    return DatasetSource(
        name=f"domain{d + 1}",
        examples=examples,
        base_classes=tuple(range(n_base)),
        novel_classes=tuple(range(n_base, cfg.classes_per_domain)),
    )


def make_synthetic_stream(cfg: SyntheticShiftConfig, seed: int) -> TaskStream:
    """Gaussian class-prototype domains pushed through per-domain rotations."""
    cfg.validate()
    sources = tuple(make_domain(cfg, d, seed) for d in range(cfg.n_domains))
    return TaskStream("datasets", sources, sources)


def split_sequential_tasks(src: DatasetSource, group_size: int, seed: int) -> TaskStream:
    """Partition the base classes into disjoint groups arriving in order.

    Leftover classes that do not fill a whole group are dropped.
    """
    n = len(src.base_classes)
    if group_size < 1 or group_size > n:
        raise CapacityError(f"group_size {group_size} does not fit {n} base classes")
    order = make_rng(seed, 6).permutation(n)
    classes = [src.base_classes[i] for i in order]
    groups = [classes[i:i + group_size] for i in range(0, n - group_size + 1, group_size)]
    datasets = tuple(
        src.restricted(sorted(g), name=f"{src.name}/group{i + 1}") for i, g in enumerate(groups)
    )
    return TaskStream("tasks", datasets, (src,))


# ------------------------------------------------------------------- images

def load_image_dir(root, side: int, novel_fraction: float = 0.2, name: str | None = None) -> DatasetSource:
    """Read ``root/<class>/*.png`` grayscale images as flat vectors in [0, 1].

    Classes are sorted by directory name; the last ``novel_fraction`` of them
    form the novel pool.
    """
    from PIL import Image

    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise CapacityError(f"{root}: no class directories")
    examples = {}
    for c, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.png"))
        if not files:
            raise CapacityError(f"{cdir}: empty class directory")
        rows = []
        for f in files:
            try:
                with Image.open(f) as img:
                    img = img.convert("L")
                    if img.size != (side, side):
                        img = img.resize((side, side), Image.BILINEAR)
                    rows.append(np.asarray(img, dtype=np.float64).ravel() / 255.0)
            except (OSError, ValueError) as exc:
                raise IngestionError(f"cannot read image {f}: {exc}") from exc
        examples[c] = np.stack(rows)
    n = len(class_dirs)
    n_novel = min(n - 1, int(round(n * novel_fraction))) if n > 1 else 0
    return DatasetSource(
        name=name or root.name,
        examples=examples,
        base_classes=tuple(range(n - n_novel)),
        novel_classes=tuple(range(n - n_novel, n)),
    )
