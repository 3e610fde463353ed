"""Run configuration and the manifest + raw-payload container used for checkpoints and datasets.

Container layout::

    STARHIT-CONTAINER
    format_version=1
    payload_bytes=<N>
    payload_sha256=<hex>
    meta.<key>=<value>            (any number; config snapshot, counters)
    tensor <name> <dtype> <shape> <offset> <count>
    ...
    end
    <N bytes of little-endian payload>

Shapes are written ``3x4`` (``-`` for scalars); offsets are bytes from the
start of the payload.  Checkpoint tensors are ``f4``; datasets also use
``f8`` and ``i8``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .model import ModelConfig
from .training import TrainConfig

MAGIC = "STARHIT-CONTAINER"
FORMAT_VERSION = 1
DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


class ContainerError(ValueError):
    """Malformed or inconsistent container file."""


class ConfigError(ValueError):
    """Unknown key or unparsable value in a run configuration."""


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    # model
    d: int = 64
    d_k: int = 128
    h: int = 4
    k: int = 8
    l: int = 2
    L_max: int = 128
    M: int = 7
    dropout: float = 0.2
    w1: float = 1.0
    w2: float = 1.0
    sampling_mode: str = "linear"
    partition_mode: str = "learnable"
    # training
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    loss: str = "softmax_bce"
    patience: int = 0
    lr_coef: float = 1.0
    warmup: int = 400
    checkpoint_every: int = 0
    grad_check: bool = False
    # data
    dataset: str = ""
    min_count: int = 10
    out_dir: str = "runs"

    def model_config(self, n_pois: int) -> ModelConfig:
        return ModelConfig(
            n_pois=n_pois, d=self.d, d_k=self.d_k, h=self.h, k=self.k, l=self.l, L_max=self.L_max, M=self.M,
            dropout=self.dropout, w1=self.w1, w2=self.w2, sampling_mode=self.sampling_mode,
            partition_mode=self.partition_mode,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed, loss=self.loss, patience=self.patience,
            grad_check=self.grad_check, checkpoint_every=self.checkpoint_every,
        )

    def items(self) -> list[tuple[str, str]]:
        return [(f.name, _fmt(getattr(self, f.name))) for f in fields(self)]

    def set(self, key: str, value: str) -> None:
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(self, key)
        try:
            if isinstance(current, bool):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                parsed: Any = value.lower() in ("true", "1", "yes")
            else:
                parsed = type(current)(value)
        except ValueError:
            raise ConfigError(f"bad value {value!r} for {key}") from None
        setattr(self, key, parsed)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_kv_lines(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip()))
    return out


def load_run_config(path=None, overrides: list[str] | None = None, seed: int | None = None, out_dir=None) -> RunConfig:
    """Defaults, then the config file, then ``KEY=VALUE`` overrides and explicit flags."""
    cfg = RunConfig()
    if path is not None:
        for key, value in parse_kv_lines(Path(path).read_text(encoding="utf-8"), str(path)):
            cfg.set(key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return cfg


def write_run_config(path, cfg: RunConfig) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in cfg.items()), encoding="utf-8")


# ---------------------------------------------------------------------------
# container


@dataclass
class Container:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)


def _dtype_code(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "f4" if arr.dtype.itemsize == 4 else "f8"
    if kind in "iub":
        return "i8"
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def encode_container(c: Container) -> bytes:
    chunks, entries, offset = [], [], 0
    for name, arr in c.tensors.items():
        if any(ch.isspace() for ch in name):
            raise ContainerError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        shape = "x".join(str(n) for n in arr.shape) or "-"
        entries.append(f"tensor {name} {code} {shape} {offset} {arr.size}")
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    head = [MAGIC, f"format_version={FORMAT_VERSION}", f"payload_bytes={len(payload)}",
            f"payload_sha256={hashlib.sha256(payload).hexdigest()}"]
    for key, value in c.meta.items():
        if "\n" in str(value) or "\n" in key:
            raise ContainerError(f"meta entry {key!r} spans lines")
        head.append(f"meta.{key}={value}")
    head += entries + ["end"]
    return ("\n".join(head) + "\n").encode("utf-8") + payload


def decode_container(blob: bytes) -> Container:
    pos = 0
    lines = []
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise ContainerError("manifest is not terminated by 'end'")
        line = blob[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        if line == "end":
            break
        lines.append(line)
    if not lines or lines[0] != MAGIC:
        raise ContainerError("not a starhit container (bad magic line)")
    header: dict[str, str] = {}
    meta: dict[str, str] = {}
    entries = []
    for line in lines[1:]:
        if line.startswith("tensor "):
            parts = line.split()
            if len(parts) != 6:
                raise ContainerError(f"bad tensor entry {line!r}")
            entries.append(parts[1:])
        elif line.startswith("meta."):
            key, _, value = line[5:].partition("=")
            meta[key] = value
        elif "=" in line:
            key, _, value = line.partition("=")
            header[key] = value
        else:
            raise ContainerError(f"unrecognised manifest line {line!r}")
    try:
        version = int(header["format_version"])
        n_bytes = int(header["payload_bytes"])
        digest = header["payload_sha256"]
    except (KeyError, ValueError):
        raise ContainerError("manifest lacks format_version / payload_bytes / payload_sha256") from None
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format_version {version}")
    payload = blob[pos:]
    if len(payload) != n_bytes:
        raise ContainerError(f"payload is {len(payload)} bytes, manifest says {n_bytes}")
    if hashlib.sha256(payload).hexdigest() != digest:
        raise ContainerError("payload checksum does not match manifest")

    tensors: dict[str, np.ndarray] = {}
    spans = []
    for name, code, shape_s, off_s, count_s in entries:
        if code not in DTYPES:
            raise ContainerError(f"{name}: unknown dtype {code!r}")
        shape = () if shape_s == "-" else tuple(int(n) for n in shape_s.split("x"))
        off, count = int(off_s), int(count_s)
        if int(np.prod(shape)) != count:
            raise ContainerError(f"{name}: shape {shape} does not hold {count} elements")
        width = np.dtype(DTYPES[code]).itemsize
        end = off + count * width
        if off < 0 or end > n_bytes:
            raise ContainerError(f"{name}: bytes [{off}, {end}) outside payload of {n_bytes}")
        spans.append((off, end, name))
        tensors[name] = np.frombuffer(payload, dtype=DTYPES[code], count=count, offset=off).reshape(shape).copy()
    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ContainerError(f"tensors {an} and {bn} overlap")
    return Container(tensors, meta)


def save_container(path, c: Container) -> None:
    Path(path).write_bytes(encode_container(c))


def load_container(path) -> Container:
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, run_cfg: RunConfig, n_pois: int, opt_state=None, epoch: int = 0) -> None:
    """Parameters (f4), optimizer moments, and the run configuration.

    ``out_dir`` is left out so identical runs written to different
    directories produce identical bytes.
    """
    tensors = {f"param.{n}": np.asarray(a, dtype=np.float32) for n, a in params.arrays().items()}
    meta = {f"config.{k}": v for k, v in run_cfg.items() if k != "out_dir"}
    meta["n_pois"] = str(n_pois)
    meta["epoch"] = str(epoch)
    meta["trainable"] = ",".join(params.trainable_names())
    if opt_state is not None:
        meta["opt.step"] = str(opt_state.step)
        for n in opt_state.m:
            tensors[f"opt.m.{n}"] = np.asarray(opt_state.m[n], dtype=np.float32)
            tensors[f"opt.v.{n}"] = np.asarray(opt_state.v[n], dtype=np.float32)
    save_container(path, Container(tensors, meta))


@dataclass
class Checkpoint:
    params: Any  # ParamStore
    run_cfg: RunConfig
    model_cfg: ModelConfig
    opt_state: Any  # OptimState or None
    epoch: int


def load_checkpoint(path) -> Checkpoint:
    from .numerics import ParamStore
    from .training import OptimState

    c = load_container(path)
    try:
        n_pois = int(c.meta["n_pois"])
        epoch = int(c.meta.get("epoch", "0"))
        trainable = set(filter(None, c.meta.get("trainable", "").split(",")))
    except (KeyError, ValueError):
        raise ContainerError("checkpoint manifest lacks n_pois") from None
    run_cfg = RunConfig()
    for key, value in c.meta.items():
        if key.startswith("config."):
            run_cfg.set(key[7:], value)
    model_cfg = run_cfg.model_config(n_pois)

    from .model import param_shapes

    expected = param_shapes(model_cfg)
    store = ParamStore(np.float32)
    for name, (shape, _) in expected.items():
        arr = c.tensors.get(f"param.{name}")
        if arr is None:
            raise ContainerError(f"checkpoint is missing parameter {name!r}")
        if arr.shape != shape:
            raise ContainerError(f"parameter {name!r}: stored shape {arr.shape}, config expects {shape}")
        store.add(name, arr, trainable=name in trainable)
    opt = None
    if "opt.step" in c.meta:
        opt = OptimState(model_cfg.d, coef=run_cfg.lr_coef, warmup_step=run_cfg.warmup)
        opt.step = int(c.meta["opt.step"])
        for name in store.trainable_names():
            opt.m[name] = c.tensors[f"opt.m.{name}"]
            opt.v[name] = c.tensors[f"opt.v.{name}"]
    return Checkpoint(store, run_cfg, model_cfg, opt, epoch)


# ---------------------------------------------------------------------------
# prepared datasets

SPLITS = ("train", "valid", "test")


def save_dataset(path, splits) -> None:
    """Stacked window arrays per split; POI ids and coordinates of the vocabulary ride along."""
    from .dataio import WindowedSample  # noqa: F401

    tensors: dict[str, np.ndarray] = {}
    users = sorted({s.user_id for part in SPLITS for s in getattr(splits, part)})
    user_index = {u: i for i, u in enumerate(users)}
    L = None
    for part in SPLITS:
        items = getattr(splits, part)
        if items:
            L = items[0].poi_ids.shape[0]
        n = len(items)
        width = L or 0
        tensors[f"{part}.poi_ids"] = np.stack([s.poi_ids for s in items]) if n else np.zeros((0, width), np.int64)
        tensors[f"{part}.coords"] = np.stack([s.coords for s in items]) if n else np.zeros((0, width, 2))
        tensors[f"{part}.timestamps"] = np.stack([s.timestamps for s in items]) if n else np.zeros((0, width), np.int64)
        tensors[f"{part}.labels"] = np.array([s.label_poi for s in items], dtype=np.int64)
        tensors[f"{part}.valid_len"] = np.array([s.valid_len for s in items], dtype=np.int64)
        tensors[f"{part}.user"] = np.array([user_index[s.user_id] for s in items], dtype=np.int64)
        tensors[f"{part}.label_ts"] = np.array([s.label_timestamp for s in items], dtype=np.int64)
        tensors[f"{part}.label_pos"] = np.array([s.label_pos for s in items], dtype=np.int64)
    tensors["vocab.coords"] = np.asarray(splits.vocab.coords, dtype=np.float64)
    meta = {"kind": "dataset", "n_pois": str(len(splits.vocab)), "L_max": str(L or 0)}
    save_container(path, Container(tensors, meta))
    # raw ids may contain any character, so they live in sidecar files
    Path(str(path) + ".pois").write_text("".join(p + "\n" for p in splits.vocab.ids), encoding="utf-8")
    Path(str(path) + ".users").write_text("".join(u + "\n" for u in users), encoding="utf-8")


def load_dataset(path):
    from .dataio import DatasetSplits, PoiVocab, WindowedSample

    c = load_container(path)
    if c.meta.get("kind") != "dataset":
        raise ContainerError(f"{path} is not a dataset container")
    pois = Path(str(path) + ".pois").read_text(encoding="utf-8").splitlines()
    users = Path(str(path) + ".users").read_text(encoding="utf-8").splitlines()
    if len(pois) != int(c.meta["n_pois"]):
        raise ContainerError("POI sidecar does not match the container")
    vocab = PoiVocab(pois, c.tensors["vocab.coords"])
    parts = {}
    for part in SPLITS:
        t = {k.split(".", 1)[1]: v for k, v in c.tensors.items() if k.startswith(part + ".")}
        items = []
        for i in range(t["labels"].shape[0]):
            n = int(t["valid_len"][i])
            items.append(
                WindowedSample(
                    users[int(t["user"][i])], t["poi_ids"][i], n, t["coords"][i], t["timestamps"][i],
                    int(t["labels"][i]), np.arange(t["poi_ids"].shape[1]) < n, int(t["label_ts"][i]), int(t["label_pos"][i]),
                )
            )
        parts[part] = items
    return DatasetSplits(parts["train"], parts["valid"], parts["test"], vocab)
