"""Synthetic paired vision/caption data for the continual benchmark.

Every token has a fixed random "appearance" row; a class is a fixed
caption template over its own disjoint vocab block. A sample swaps each
caption token within the class block with probability p_swap, renders the
swapped sequence through the appearance table, and adds Gaussian noise, so
image-caption pairing is sample-level and retrieval is learnable through a
generically pretrained backbone. Each continual task additionally offsets
all of its vision patches by a fixed random vector (a per-task domain gap
that prompt tuning can close). The pretraining corpus comes from disjoint
generic classes with freshly drawn token sequences per sample and no
offset. All randomness comes from named streams of the master seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import rng

# the 12 super-category names used as task names, in a fixed order
SUPER_CATEGORIES = (
    "appliance", "sports", "outdoor", "electronic", "accessory", "indoor",
    "kitchen", "furniture", "vehicle", "food", "animal", "person",
)

_BIN_MAGIC = b"PCLDATA1"


@dataclass
class GeneratorSpec:
    task_names: tuple = SUPER_CATEGORIES[:4]
    classes_per_task: int = 5
    train_per_class: int = 40
    test_per_class: int = 20
    sigma_noise: float = 0.3
    p_swap: float = 0.25
    sigma_shift: float = 0.7
    block_size: int = 16
    pretrain_classes: int = 8
    pretrain_per_class: int = 40
    n_patches: int = 16
    patch_dim: int = 8
    cap_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.task_names, str):
            self.task_names = tuple(s.strip() for s in self.task_names.split(",") if s.strip())
        else:
            self.task_names = tuple(self.task_names)
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be >= 0")
        if self.sigma_shift < 0:
            raise ValueError("sigma_shift must be >= 0")
        if not (0.0 <= self.p_swap <= 1.0):
            raise ValueError("p_swap must lie in [0, 1]")
        if self.block_size < self.cap_len:
            raise ValueError("block_size must be >= cap_len so templates fit in one block")
        if self.n_patches != self.cap_len:
            raise ValueError("n_patches must equal cap_len: one patch per template token")

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)

    def vocab_layout(self) -> dict:
        """Token-id blocks: task-name tokens first, then per-class blocks."""
        layout = {"task_tokens": {name: i for i, name in enumerate(self.task_names)}}
        off = len(self.task_names)
        blocks = {}
        for c in range(self.pretrain_classes):
            blocks[f"pretrain/{c}"] = (off, off + self.block_size)
            off += self.block_size
        for t, name in enumerate(self.task_names):
            for c in range(self.classes_per_task):
                blocks[f"{name}/{c}"] = (off, off + self.block_size)
                off += self.block_size
        layout["blocks"] = blocks
        layout["vocab"] = off
        spans = sorted(blocks.values())
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError(f"overlapping vocab blocks: ({a0},{a1}) and ({b0},{b1})")
        return layout


@dataclass
class SampleSet:
    vision: np.ndarray    # (N, n_patches, patch_dim) float64
    captions: np.ndarray  # (N, cap_len) uint32
    class_ids: np.ndarray  # (N,) uint32


@dataclass
class TaskData:
    name: str
    task_id: int
    task_token: int
    classes: list
    train: SampleSet
    test: SampleSet


@dataclass
class Dataset:
    spec: GeneratorSpec
    vocab: int
    tasks: list
    pretrain: SampleSet
    task_tokens: dict
    appearance: np.ndarray  # (vocab, patch_dim) shared token appearance rows


def _write_bin(path: Path, s: SampleSet) -> None:
    n, n_patches, patch_dim = s.vision.shape
    cap_len = s.captions.shape[1]
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<IIII", n, n_patches, patch_dim, cap_len))
        fh.write(np.ascontiguousarray(s.vision, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(s.captions, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(s.class_ids, dtype="<u4").tobytes())


def _read_bin(path: Path) -> SampleSet:
    raw = Path(path).read_bytes()
    if raw[:8] != _BIN_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    n, n_patches, patch_dim, cap_len = struct.unpack_from("<IIII", raw, 8)
    off = 8 + 16
    vn = n * n_patches * patch_dim * 8
    vision = np.frombuffer(raw, dtype="<f8", count=n * n_patches * patch_dim,
                           offset=off).reshape(n, n_patches, patch_dim)
    off += vn
    captions = np.frombuffer(raw, dtype="<u4", count=n * cap_len,
                             offset=off).reshape(n, cap_len)
    off += n * cap_len * 4
    class_ids = np.frombuffer(raw, dtype="<u4", count=n, offset=off)
    return SampleSet(vision=vision.copy(), captions=captions.copy(),
                     class_ids=class_ids.copy())


def _make_samples(templates: list, spec: GeneratorSpec, appearance: np.ndarray,
                  per_class: int, gen: np.random.Generator, blocks: list,
                  fresh_tokens: bool = False) -> SampleSet:
    """Task samples perturb the class template; pretrain samples
    (fresh_tokens) draw a new sequence from the class block every time, so
    pretraining must learn the token-level alignment rather than class
    identity."""
    vision, captions, ids = [], [], []
    for cid, (template, (b0, b1)) in enumerate(zip(templates, blocks)):
        for _ in range(per_class):
            if fresh_tokens:
                cap = gen.integers(b0, b1, size=spec.cap_len).astype(np.uint32)
                proto = appearance[cap]
            else:
                cap = template.copy()
                swap = gen.random(spec.cap_len) < spec.p_swap
                if swap.any():
                    cap[swap] = gen.integers(b0, b1, size=int(swap.sum()))
                # the image reflects the swapped tokens too, so each pair
                # within a class stays identifiable
                proto = appearance[cap]                   # (n_patches, patch_dim)
            noise = gen.normal(0.0, spec.sigma_noise, proto.shape) if spec.sigma_noise > 0 \
                else np.zeros(proto.shape)
            vision.append(proto + noise)
            captions.append(cap)
            ids.append(cid)
    return SampleSet(
        vision=np.asarray(vision, dtype=np.float64),
        captions=np.asarray(captions, dtype=np.uint32),
        class_ids=np.asarray(ids, dtype=np.uint32),
    )


def build_dataset(spec: GeneratorSpec) -> Dataset:
    layout = spec.vocab_layout()
    vocab = layout["vocab"]
    appearance = rng.stream(spec.seed, "gen.appearance").standard_normal(
        (vocab, spec.patch_dim))

    def template_for(key: str) -> np.ndarray:
        b0, b1 = layout["blocks"][key]
        g = rng.stream(spec.seed, f"gen.template.{key}")
        return g.choice(np.arange(b0, b1, dtype=np.uint32), size=spec.cap_len,
                        replace=False)

    # pretraining corpus from disjoint generic classes
    pre_templates = [template_for(f"pretrain/{c}") for c in range(spec.pretrain_classes)]
    pre_blocks = [layout["blocks"][f"pretrain/{c}"] for c in range(spec.pretrain_classes)]
    pretrain = _make_samples(pre_templates, spec, appearance, spec.pretrain_per_class,
                             rng.stream(spec.seed, "gen.pretrain"), pre_blocks,
                             fresh_tokens=True)

    tasks = []
    for t, name in enumerate(spec.task_names):
        keys = [f"{name}/{c}" for c in range(spec.classes_per_task)]
        templates = [template_for(k) for k in keys]
        blocks = [layout["blocks"][k] for k in keys]
        train = _make_samples(templates, spec, appearance, spec.train_per_class,
                              rng.stream(spec.seed, f"gen.train.{name}"), blocks)
        test = _make_samples(templates, spec, appearance, spec.test_per_class,
                             rng.stream(spec.seed, f"gen.test.{name}"), blocks)
        if spec.sigma_shift > 0:
            # a constant per-task offset on every patch: the domain gap
            # between the pretraining corpus and each continual task that
            # the learned prompts exist to close
            shift = rng.stream(spec.seed, f"gen.shift.{name}").normal(
                0.0, 1.0, spec.patch_dim)
            shift *= spec.sigma_shift * np.sqrt(spec.patch_dim) / np.linalg.norm(shift)
            train.vision = train.vision + shift
            test.vision = test.vision + shift
        tasks.append(TaskData(
            name=name, task_id=t, task_token=layout["task_tokens"][name],
            classes=keys, train=train, test=test,
        ))
    return Dataset(spec=spec, vocab=vocab, tasks=tasks, pretrain=pretrain,
                   task_tokens=layout["task_tokens"], appearance=appearance)


def generate_dataset(spec: GeneratorSpec, out_dir) -> Dataset:
    """Build and write the dataset directory layout."""
    ds = build_dataset(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": 1,
        "vocab": ds.vocab,
        "n_patches": spec.n_patches,
        "patch_dim": spec.patch_dim,
        "cap_len": spec.cap_len,
        "task_names": list(spec.task_names),
        "task_tokens": ds.task_tokens,
        "spec": {f.name: (list(getattr(spec, f.name))
                          if isinstance(getattr(spec, f.name), tuple)
                          else getattr(spec, f.name))
                 for f in fields(spec)},
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    with open(out / "appearance.bin", "wb") as fh:
        fh.write(struct.pack("<II", *ds.appearance.shape))
        fh.write(np.ascontiguousarray(ds.appearance, dtype="<f8").tobytes())
    pre_dir = out / "pretrain"
    pre_dir.mkdir(exist_ok=True)
    _write_bin(pre_dir / "train.bin", ds.pretrain)
    for task in ds.tasks:
        tdir = out / f"task_{task.name}"
        tdir.mkdir(exist_ok=True)
        _write_bin(tdir / "train.bin", task.train)
        _write_bin(tdir / "test.bin", task.test)
        tmeta = {
            "task": task.name,
            "task_id": task.task_id,
            "task_token": task.task_token,
            "classes": task.classes,
        }
        (tdir / "meta.json").write_text(json.dumps(tmeta, indent=2, sort_keys=True) + "\n")
    return ds


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    meta = json.loads((root / "meta.json").read_text())
    spec = GeneratorSpec(**meta["spec"])
    raw = (root / "appearance.bin").read_bytes()
    n, d = struct.unpack_from("<II", raw, 0)
    appearance = np.frombuffer(raw, dtype="<f8", count=n * d, offset=8).reshape(n, d).copy()
    pretrain = _read_bin(root / "pretrain" / "train.bin")
    tasks = []
    for name in meta["task_names"]:
        tdir = root / f"task_{name}"
        tmeta = json.loads((tdir / "meta.json").read_text())
        tasks.append(TaskData(
            name=name, task_id=tmeta["task_id"], task_token=tmeta["task_token"],
            classes=tmeta["classes"],
            train=_read_bin(tdir / "train.bin"),
            test=_read_bin(tdir / "test.bin"),
        ))
    return Dataset(spec=spec, vocab=meta["vocab"], tasks=tasks, pretrain=pretrain,
                   task_tokens=meta["task_tokens"], appearance=appearance)


def parse_generator_spec(text: str) -> GeneratorSpec:
    """Parse the flat [generator] key = value spec file."""
    import configparser

    cp = configparser.ConfigParser()
    cp.read_string(text)
    if not cp.has_section("generator"):
        raise ValueError("generator spec missing [generator] section")
    kwargs = {}
    types = {f.name: f.type for f in fields(GeneratorSpec)}
    casts = {"int": int, "float": float, "str": str, "tuple": str}
    for key, raw in cp.items("generator"):
        if key not in types:
            raise ValueError(f"unknown generator key {key!r}")
        kwargs[key] = casts[types[key]](raw)
    return GeneratorSpec(**kwargs)


def print_generator_spec(spec: GeneratorSpec) -> str:
    lines = ["[generator]"]
    for f in fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = ",".join(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
