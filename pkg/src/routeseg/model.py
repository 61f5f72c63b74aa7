"""Seven-stage u-shaped network assembly.

Encoder stages 1-3 run blocks at C, 2C, 4C on strides 4, 8, 16, each
followed by a patch merge; stage 4 sits at 8C on stride 32. Decoder
stages 5-7 mirror 4C, 2C, C, each entered through a patch expand and,
where the skip mask allows, a fusion with the matching encoder output
(expand -> concat/fuse -> blocks). A final 4x expand and a linear head
produce per-pixel class logits at input resolution.

The default depths put zero blocks in stage 4: the published parameter
and FLOP totals for this architecture are only mutually consistent with
an empty bottleneck (the merge to 8C and the expand back remain), so the
preset reproduces those totals; any other depth layout is a config edit
away and fully supported.

Partitioning: every stage uses the configured factor S where its side
divides, otherwise the largest divisor of the side that fits, so deep
stages degrade to single-pixel regions and finally to one region. top_k
is clamped per stage to the available region count.
"""

from __future__ import annotations

import struct as structmod
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attention import PartitionSpec, attention_flops, effective_s
from .blocks import (MLP_RATIO, BlockParams, PatchEmbedParams,
                     PatchExpandParams, PatchMergeParams, block_forward,
                     patch_embed, patch_expand, patch_merge)
from .fusion import (FusionParams, PlainFuseParams, channel_spatial_fuse,
                     plain_fuse)
from .params import ParamStruct, bind, trunc_normal, walk_buffers, walk_tensors, zeros
from .tensor import Tape, Tensor, dense

HEAD_DIM = 32
NUM_STAGES = 7


class ConfigError(ValueError):
    """Bad configuration; the CLI maps this to exit code 2."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 9
    base_channels: int = 96
    stage_depths: Tuple[int, ...] = (2, 2, 8, 0, 8, 2, 2)
    top_k_schedule: Optional[Tuple[int, ...]] = None
    s: int = 7
    input_hw: int = 224
    sccsa: bool = True
    skip_mask: Tuple[bool, bool, bool] = (True, True, True)
    scale_mode: str = "per_head"
    qkv_bias: bool = True

    def validate(self) -> "ModelConfig":
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError(
                f"base_channels must be even and >= 2, got {self.base_channels}")
        if len(self.stage_depths) != NUM_STAGES:
            raise ConfigError(f"stage_depths wants {NUM_STAGES} entries, "
                              f"got {len(self.stage_depths)}")
        if any(d < 0 for d in self.stage_depths):
            raise ConfigError(f"negative stage depth in {self.stage_depths}")
        if self.s < 1:
            raise ConfigError(f"partition factor must be >= 1, got {self.s}")
        if self.input_hw < 32 or self.input_hw % 32:
            raise ConfigError(
                f"input_hw must be a positive multiple of 32, got {self.input_hw}")
        ks = self.resolved_top_k()
        if len(ks) != NUM_STAGES or any(k < 1 for k in ks):
            raise ConfigError(f"top_k_schedule wants {NUM_STAGES} entries >= 1, "
                              f"got {ks}")
        if len(self.skip_mask) != 3:
            raise ConfigError(f"skip_mask wants 3 entries, got {self.skip_mask}")
        if self.scale_mode not in ("per_head", "model_dim"):
            raise ConfigError(f"unknown scale_mode {self.scale_mode!r}")
        return self

    def resolved_top_k(self) -> Tuple[int, ...]:
        if self.top_k_schedule is not None:
            return tuple(self.top_k_schedule)
        s2 = self.s * self.s
        return (2, 4, 8, s2, 8, 4, 2)

    def stage_geometry(self) -> List[Tuple[int, int]]:
        """Seven (side, channels) pairs, encoder through decoder."""
        q = self.input_hw // 4
        c = self.base_channels
        return [(q, c), (q // 2, 2 * c), (q // 4, 4 * c), (q // 8, 8 * c),
                (q // 4, 4 * c), (q // 2, 2 * c), (q, c)]

    @staticmethod
    def heads_for(dim: int) -> int:
        return max(1, dim // HEAD_DIM)


@dataclass
class ModelParams(ParamStruct):
    embed: PatchEmbedParams
    stages: List[List[BlockParams]]
    merges: List[PatchMergeParams]
    expands: List[PatchExpandParams]
    fuses: List[Optional[object]]       # decoder order: 1/16, 1/8, 1/4
    final_expand: PatchExpandParams
    head_w: Tensor
    head_b: Tensor


@dataclass
class Model:
    cfg: ModelConfig
    params: ModelParams
    specs: List[PartitionSpec]
    top_k: List[int]

    def bind(self, tape: Tape) -> "Model":
        return Model(self.cfg, bind(self.params, tape), self.specs, self.top_k)

    def records(self) -> Dict[str, np.ndarray]:
        """Parameters then buffers, dotted names, insertion-ordered."""
        out = dict(
            (name, t.data) for name, t in walk_tensors(self.params))
        for name, buf in walk_buffers(self.params):
            out[name] = buf
        return out

    def forward(self, x, training: bool = False,
                capture: Optional[Tuple[int, int]] = None):
        """Logits [N, H, W, K]; with ``capture=(stage, block)`` (0-based)
        also the attention trace from that block."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x))
        n = x.shape[0] if x.ndim else 0
        want = (x.ndim == 4 and x.shape[1] == self.cfg.input_hw
                and x.shape[2] == self.cfg.input_hw
                and x.shape[3] == self.cfg.in_channels)
        if not want or n < 1:
            raise ValueError(
                f"forward wants [N>=1, {self.cfg.input_hw}, {self.cfg.input_hw}, "
                f"{self.cfg.in_channels}], got {x.shape}")
        p = self.params
        trace = None

        def run_stage(h, idx):
            nonlocal trace
            for b, blk in enumerate(p.stages[idx]):
                if capture == (idx, b) or (
                        capture is not None and capture[0] == idx
                        and capture[1] == -1 and b == len(p.stages[idx]) - 1):
                    h, trace = block_forward(h, blk, self.specs[idx],
                                             self.top_k[idx], capture=True)
                else:
                    h = block_forward(h, blk, self.specs[idx], self.top_k[idx])
            return h

        h = patch_embed(x, p.embed)
        skips = []
        for i in range(3):
            h = run_stage(h, i)
            skips.append(h)
            h = patch_merge(h, p.merges[i])
        h = run_stage(h, 3)
        for j in range(3):
            h = patch_expand(h, p.expands[j])
            fuse = p.fuses[j]
            if fuse is not None:
                skip = skips[2 - j]
                if isinstance(fuse, FusionParams):
                    h = channel_spatial_fuse(skip, h, fuse, training=training)
                else:
                    h = plain_fuse(skip, h, fuse)
            h = run_stage(h, 4 + j)
        h = patch_expand(h, p.final_expand)
        logits = dense(h, p.head_w, p.head_b)
        if capture is not None:
            return logits, trace
        return logits


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    cfg.validate()
    rng = np.random.default_rng(seed)
    geometry = cfg.stage_geometry()
    ks = cfg.resolved_top_k()

    specs, top_k = [], []
    for (side, _), k in zip(geometry, ks):
        s_eff = effective_s(side, cfg.s)
        spec = PartitionSpec.build(side, side, s_eff)
        specs.append(spec)
        top_k.append(min(k, spec.num_regions))

    stages = []
    for (_, dim), depth in zip(geometry, cfg.stage_depths):
        stages.append([
            BlockParams.init(dim, cfg.heads_for(dim), rng, dtype=dtype,
                             qkv_bias=cfg.qkv_bias, scale_mode=cfg.scale_mode)
            for _ in range(depth)])

    c = cfg.base_channels
    merges = [PatchMergeParams.init(c, rng, dtype),
              PatchMergeParams.init(2 * c, rng, dtype),
              PatchMergeParams.init(4 * c, rng, dtype)]
    expands = [PatchExpandParams.init(8 * c, 2, rng, dtype),
               PatchExpandParams.init(4 * c, 2, rng, dtype),
               PatchExpandParams.init(2 * c, 2, rng, dtype)]

    fuses: List[Optional[object]] = []
    decoder_dims = (4 * c, 2 * c, c)
    for j, n in enumerate(decoder_dims):
        enabled = cfg.skip_mask[2 - j]      # mask order: 1/4, 1/8, 1/16
        if not enabled:
            fuses.append(None)
        elif cfg.sccsa:
            fuses.append(FusionParams.init(n, rng, dtype))
        else:
            fuses.append(PlainFuseParams.init(n, rng, dtype))

    params = ModelParams(
        embed=PatchEmbedParams.init(cfg.in_channels, c, rng, dtype),
        stages=stages,
        merges=merges,
        expands=expands,
        fuses=fuses,
        final_expand=PatchExpandParams.init(c, 4, rng, dtype),
        head_w=Tensor(trunc_normal(rng, (c, cfg.num_classes), dtype=dtype)),
        head_b=Tensor(zeros((cfg.num_classes,), dtype)),
    )
    return Model(cfg, params, specs, top_k)


# ---------------------------------------------------------------------------
# counting


_GROUP_LABELS = {
    "embed": "embed",
    "merges": "merges",
    "expands": "expands",
    "final_expand": "expands",
    "fuses": "fusion",
    "head_w": "head",
    "head_b": "head",
}


def count_params(model: Model) -> Dict[str, int]:
    """Learnable scalar counts per module group; buffers excluded."""
    table: Dict[str, int] = {f"stage{i + 1}": 0 for i in range(NUM_STAGES)}
    table.update(embed=0, merges=0, expands=0, fusion=0, head=0)
    for name, t in walk_tensors(model.params):
        root = name.split(".")[0]
        if root == "stages":
            group = f"stage{int(name.split('.')[1]) + 1}"
        else:
            group = _GROUP_LABELS[root]
        table[group] = table.get(group, 0) + t.size
    table["total"] = sum(v for k, v in table.items())
    return table


FLOP_CONVENTION = (
    "MACs: one multiply-accumulate counted once; convs and affines cost "
    "out_positions * k_h * k_w * (c_in / groups) * c_out, attention cost is "
    "the routing + token model, norms cost 2 per element; activations, "
    "gates, residual adds and rearrangements are not counted")


def count_flops(cfg: ModelConfig) -> Dict[str, object]:
    """Analytic MACs for one forward at batch 1. See FLOP_CONVENTION."""
    cfg.validate()
    hw = cfg.input_hw
    c = cfg.base_channels
    geometry = cfg.stage_geometry()
    ks = cfg.resolved_top_k()
    table: Dict[str, int] = {}

    half = hw // 2
    quarter = hw // 4
    table["embed"] = (half * half * (9 * cfg.in_channels * (c // 2)
                                     + 2 * (c // 2))
                      + quarter * quarter * (9 * (c // 2) * c + 2 * c))

    for i, ((side, dim), depth) in enumerate(zip(geometry, cfg.stage_depths)):
        if depth == 0:
            table[f"stage{i + 1}"] = 0
            continue
        s_eff = effective_s(side, cfg.s)
        k_eff = min(ks[i], s_eff * s_eff)
        attn = attention_flops(side * side, dim, s_eff, k_eff)["total_macs"]
        per_block = (side * side * (9 * dim            # dw conv
                                    + 4 * dim          # two layer norms
                                    + 4 * dim * dim    # q, k, v, o projections
                                    + 25 * dim         # local context conv
                                    + 2 * MLP_RATIO * dim * dim)
                     + attn)
        table[f"stage{i + 1}"] = depth * per_block

    total_merge = 0
    for i in range(3):
        din = c * (2 ** i)
        side = geometry[i][0] // 2
        total_merge += side * side * (9 * din * 2 * din + 2 * 2 * din)
    table["merges"] = total_merge

    total_expand = 0
    for j in range(3):
        side_in, din = geometry[3 + j]     # 8C@1/32, 4C@1/16, 2C@1/8
        total_expand += side_in * side_in * din * (4 * (din // 2))
    total_expand += quarter * quarter * c * 16 * c     # final 4x expand
    table["expands"] = total_expand

    total_fuse = 0
    for j, n in enumerate((4 * c, 2 * c, c)):
        if not cfg.skip_mask[2 - j]:
            continue
        side = geometry[4 + j][0]
        wide, mid = 2 * n, (2 * n) // 4
        if cfg.sccsa:
            total_fuse += side * side * (
                wide * mid + mid * wide            # channel gate MLP
                + 49 * wide * mid + 2 * mid        # conv1 + bn
                + 49 * mid * wide                  # conv2
                + wide * n)                        # out affine
        else:
            total_fuse += side * side * wide * n
    table["fusion"] = total_fuse

    table["head"] = hw * hw * c * cfg.num_classes
    total = sum(table.values())
    return {"per_module": table, "total_macs": total,
            "convention": FLOP_CONVENTION}


# ---------------------------------------------------------------------------
# checkpoint io

CKPT_MAGIC = b"BRUN"
CKPT_VERSION = 1
_DTYPE_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def write_records(path: str, config_text: str, records: Dict[str, np.ndarray]):
    """Binary checkpoint: magic, version, config text, named tensors.

    All header integers little-endian; payloads are raw little-endian
    scalars. Round-trips bit-exactly.
    """
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(structmod.pack("<I", CKPT_VERSION))
        cb = config_text.encode("utf-8")
        f.write(structmod.pack("<I", len(cb)))
        f.write(cb)
        f.write(structmod.pack("<I", len(records)))
        for name, arr in records.items():
            tag = _DTYPE_TAG.get(arr.dtype)
            if tag is None:
                raise CheckpointError(f"{name}: dtype {arr.dtype} not storable")
            nb = name.encode("utf-8")
            f.write(structmod.pack("<H", len(nb)))
            f.write(nb)
            f.write(structmod.pack("<B", arr.ndim))
            if arr.ndim:
                f.write(structmod.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(structmod.pack("<B", tag))
            f.write(np.ascontiguousarray(arr, dtype=_TAG_DTYPE[tag]).tobytes())


def read_records(path: str) -> Tuple[str, Dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"{path}: {e}") from e
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = structmod.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (clen,) = structmod.unpack("<I", take(4, "config length"))
    config_text = bytes(take(clen, "config")).decode("utf-8")
    (count,) = structmod.unpack("<I", take(4, "record count"))
    records: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = structmod.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        (rank,) = structmod.unpack("<B", take(1, "rank"))
        dims = structmod.unpack(f"<{rank}Q", take(8 * rank, "dims")) if rank else ()
        (tag,) = structmod.unpack("<B", take(1, "dtype"))
        if tag not in _TAG_DTYPE:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dt = _TAG_DTYPE[tag]
        need = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(need * dt.itemsize, f"payload of {name}")
        arr = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
        records[name] = arr.astype(arr.dtype.newbyteorder("="), copy=False)
    if pos != len(view):
        raise CheckpointError(f"{path}: {len(view) - pos} trailing bytes")
    return config_text, records


def save_model(path: str, model: Model, config_text: str = "",
               extras: Optional[Dict[str, np.ndarray]] = None):
    records = model.records()
    for key, arr in (extras or {}).items():
        if key in records:
            raise CheckpointError(f"extra record {key} collides with a parameter")
        records[key] = np.asarray(arr)
    write_records(path, config_text, records)


def load_into_model(model: Model, records: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Copy matching records into the model; return the leftovers.

    Every model parameter and buffer must be present with an identical
    shape and dtype, otherwise the checkpoint does not describe this
    architecture and loading aborts.
    """
    wanted = model.records()
    extras = dict(records)
    for name, dst in wanted.items():
        src = extras.pop(name, None)
        if src is None:
            raise CheckpointError(f"checkpoint is missing {name}")
        if src.shape != dst.shape or src.dtype != dst.dtype:
            raise CheckpointError(
                f"{name}: checkpoint has {src.dtype}{src.shape}, "
                f"model wants {dst.dtype}{dst.shape}")
        dst[...] = src
    return extras
