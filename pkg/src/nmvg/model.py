"""Run configuration, weight generation and the end-to-end pipeline.

A Model binds every named tensor of a weight archive into the typed
parameter bundles of the individual modules and exposes a pure forward
pass: encoders -> per-stage triplet fusion -> pyramid -> expert routing
-> detection and segmentation heads.  Weight archives are generated
deterministically: each tensor gets its own generator seeded from the
global seed plus the tensor name, so any single tensor is reproducible
in isolation.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .archive import ArchiveError, WeightArchive
from .encoders import (
    EncoderConfig,
    ImageEncoderParams,
    RadarEncoderParams,
    RadarStage,
    SeparableDown,
    TextEncoderParams,
    TokenSequence,
    image_encoder,
    load_vocab,
    radar_encoder,
    text_encoder,
    tokenize,
)
from .enmoe import MIN_EXTENT, EnMoeParams, enmoe_forward
from .fpn import FpnParams, fpn_forward
from .fusion import (
    DeformParams,
    EcaParams,
    TmdfParams,
    sinusoidal_encoding,
    tmdf_fuse,
)
from .heads import (
    BinaryMask,
    BranchParams,
    DetectionBox,
    MsRepParams,
    RecHeadParams,
    ResHeadParams,
    decode_boxes,
    msrep_fuse,
    rec_head_forward,
    res_head_forward,
)
from .rasters import read_image, read_radar, write_boxes, write_mask, write_radar_raw, write_ppm
from .tensor import BNParams, ConvParams, ShapeError

DEFAULT_VOCAB = (
    "<pad>",
    "the", "a", "on", "near", "left", "right", "red", "green", "white",
    "small", "large", "fast", "slow", "moving", "still", "vessel", "boat",
    "ship", "buoy", "dock", "bridge", "water", "channel", "port", "starboard",
)

_MSREP_LEVELS = (5, 4, 3)
_BRANCH_KEYS = ("conv3.kernel", "bn3", "conv1.kernel", "bn1", "bnid")


@dataclass(frozen=True)
class RunConfig:
    input_size: int = 640
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 96)
    fpn_channels: int = 64
    embed_dim: int = 64
    text_vocab: int = len(DEFAULT_VOCAB)
    text_len: int = 50
    attention_normalize: bool = False
    head_scale: int = 2
    topk: int = 10
    score_thresh: float = 0.6
    mask_thresh: float = 0.0
    seed: int = 0
    vocab_path: str | None = None
    loss_config_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if self.input_size < 32 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.head_scale not in (2, 3, 4, 5):
            raise ValueError(f"head_scale must be one of 2..5, got {self.head_scale}")
        if self.topk < 1:
            raise ValueError(f"topk must be >= 1, got {self.topk}")
        EncoderConfig(
            stage_channels=self.stage_channels,
            text_vocab=self.text_vocab,
            text_len=self.text_len,
            embed_dim=self.embed_dim,
        )

    def stage_size(self, i: int) -> int:
        return self.input_size // (4 * (1 << i))

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            stage_channels=self.stage_channels,
            text_vocab=self.text_vocab,
            text_len=self.text_len,
            embed_dim=self.embed_dim,
        )

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        values: dict = {}
        fields = cls.__dataclass_fields__
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected `key = value`, got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown setting {key!r}")
            values[key] = _parse_config_value(key, val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _parse_config_value(key: str, val: str):
    if key == "stage_channels":
        return tuple(int(v) for v in val.split(","))
    if key in ("vocab_path", "loss_config_path"):
        return val
    if key == "attention_normalize":
        low = val.lower()
        if low not in ("true", "false", "1", "0"):
            raise ValueError(f"{key} must be a boolean, got {val!r}")
        return low in ("true", "1")
    if key in ("score_thresh", "mask_thresh"):
        return float(val)
    return int(val)


# ---------------------------------------------------------------------------
# parameter manifest and deterministic generation
# ---------------------------------------------------------------------------


def _bn_names(shapes: dict, prefix: str, c: int) -> None:
    for f in ("gamma", "beta", "mean", "var"):
        shapes[f"{prefix}.{f}"] = (c,)


def parameter_shapes(cfg: RunConfig) -> dict[str, tuple[int, ...]]:
    """Every named tensor of the trainable-form model, in binding order."""
    s: dict[str, tuple[int, ...]] = {}
    ch = cfg.stage_channels
    f = cfg.fpn_channels
    e = cfg.embed_dim

    s["img_enc.stem.dw.kernel"] = (3, 1, 3, 3)
    s["img_enc.stem.pw.kernel"] = (ch[0], 3, 1, 1)
    _bn_names(s, "img_enc.stem.bn", ch[0])
    for i in range(4):
        cin = ch[0] if i == 0 else ch[i - 1]
        s[f"img_enc.stage{i}.dw.kernel"] = (cin, 1, 3, 3)
        s[f"img_enc.stage{i}.pw.kernel"] = (ch[i], cin, 1, 1)
        _bn_names(s, f"img_enc.stage{i}.bn", ch[i])

    s["radar_enc.stem.dw.kernel"] = (3, 1, 3, 3)
    _bn_names(s, "radar_enc.stem.bn", 3)
    for i in range(4):
        cin = 3 if i == 0 else ch[i - 1]
        for blk in ("block1", "block2"):
            s[f"radar_enc.stage{i}.{blk}.dw.kernel"] = (cin, 1, 3, 3)
            _bn_names(s, f"radar_enc.stage{i}.{blk}.bn", cin)
        s[f"radar_enc.stage{i}.down.dw.kernel"] = (cin, 1, 3, 3)
        s[f"radar_enc.stage{i}.down.pw.kernel"] = (ch[i], cin, 1, 1)
        _bn_names(s, f"radar_enc.stage{i}.down.bn", ch[i])

    s["text_enc.embedding"] = (cfg.text_vocab, e)
    for i in range(4):
        s[f"text_adapt.stage{i}.weight"] = (ch[i], e)
        s[f"text_adapt.stage{i}.bias"] = (ch[i],)

    for i in range(4):
        c = ch[i]
        side = cfg.stage_size(i)
        s[f"tmdf.stage{i}.w_img.kernel"] = (c, 1, 1, 1)
        s[f"tmdf.stage{i}.w_radar.kernel"] = (c, 1, 1, 1)
        s[f"tmdf.stage{i}.eca.weights"] = (3,)
        s[f"tmdf.stage{i}.deform.offset.kernel"] = (18, c, 3, 3)
        s[f"tmdf.stage{i}.deform.offset.bias"] = (18,)
        s[f"tmdf.stage{i}.deform.main.kernel"] = (c, c, 3, 3)
        s[f"tmdf.stage{i}.deform.main.bias"] = (c,)
        s[f"tmdf.stage{i}.lpe"] = (1, c, side, side)
        s[f"tmdf.stage{i}.w_text.weight"] = (c, c)
        s[f"tmdf.stage{i}.w_text.bias"] = (c,)

    for level, i in zip((2, 3, 4, 5), range(4)):
        s[f"fpn.lateral{level}.kernel"] = (f, ch[i], 1, 1)
        s[f"fpn.lateral{level}.bias"] = (f,)
        s[f"fpn.smooth{level}.kernel"] = (f, f, 3, 3)
        s[f"fpn.smooth{level}.bias"] = (f,)

    for i in range(4):
        p = f"enmoe.stage{i}"
        s[f"{p}.edge.kernel"] = (f, 1, 1, 1)
        _bn_names(s, f"{p}.edge_bn", f)
        s[f"{p}.nbr.kernel"] = (f, 1, 5, 5)
        _bn_names(s, f"{p}.nbr_bn", f)
        s[f"{p}.gate_h.kernel"] = (f, f, 1, 1)
        s[f"{p}.gate_h.bias"] = (f,)
        s[f"{p}.gate_l.kernel"] = (f, f, 1, 1)
        s[f"{p}.gate_l.bias"] = (f,)
        s[f"{p}.w_o.kernel"] = (f, f, 1, 1)
        s[f"{p}.w_o.bias"] = (f,)
        s[f"{p}.theta1_raw"] = (1,)
        s[f"{p}.theta2_raw"] = (1,)

    for branch, out in (("conf", 1), ("wh", 2), ("offset", 2)):
        p = f"rec.{branch}"
        s[f"{p}.dw.kernel"] = (f, 1, 3, 3)
        _bn_names(s, f"{p}.dw_bn", f)
        s[f"{p}.pw.kernel"] = (f, f, 1, 1)
        _bn_names(s, f"{p}.pw_bn", f)
        s[f"{p}.proj.kernel"] = (out, f, 1, 1)
        s[f"{p}.proj.bias"] = (out,)

    s["res.entry.kernel"] = (f, 1, 1, 1)
    for level in _MSREP_LEVELS:
        p = f"res.msrep{level}"
        s[f"{p}.conv3.kernel"] = (f, 1, 3, 3)
        _bn_names(s, f"{p}.bn3", f)
        s[f"{p}.conv1.kernel"] = (f, 1, 1, 1)
        _bn_names(s, f"{p}.bn1", f)
        _bn_names(s, f"{p}.bnid", f)
    s["res.proj.kernel"] = (1, f, 1, 1)
    s["res.proj.bias"] = (1,)
    return s


def _init_tensor(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    rng = np.random.default_rng((seed, zlib.crc32(name.encode())))
    leaf = name.rsplit(".", 1)[-1]
    parent = name.rsplit(".", 2)[-2] if name.count(".") >= 2 else ""
    if leaf in ("lpe",) or "deform.offset" in name or leaf.startswith("theta"):
        return np.zeros(shape, dtype=np.float32)
    if leaf == "bias":
        return np.zeros(shape, dtype=np.float32)
    if leaf == "gamma":
        return rng.uniform(0.8, 1.2, size=shape).astype(np.float32)
    if leaf == "beta" or leaf == "mean":
        return (0.05 * rng.standard_normal(shape)).astype(np.float32)
    if leaf == "var":
        return rng.uniform(0.5, 1.5, size=shape).astype(np.float32)
    if leaf == "weights":  # eca
        return (0.5 * rng.standard_normal(shape)).astype(np.float32)
    if leaf == "embedding":
        return (0.5 * rng.standard_normal(shape)).astype(np.float32)
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    elif len(shape) == 2:
        fan_in = shape[1]
    else:
        fan_in = shape[0]
    std = float(np.sqrt(2.0 / max(fan_in, 1)))
    return (std * rng.standard_normal(shape)).astype(np.float32)


def generate_archive(cfg: RunConfig, seed: int | None = None) -> WeightArchive:
    """Deterministic random weights for every tensor of the model."""
    seed = cfg.seed if seed is None else seed
    entries = {
        name: _init_tensor(name, shape, seed)
        for name, shape in parameter_shapes(cfg).items()
    }
    return WeightArchive(entries=entries)


# ---------------------------------------------------------------------------
# binding
# ---------------------------------------------------------------------------


class _Binder:
    def __init__(self, archive: WeightArchive):
        self.archive = archive

    def arr(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        a = self.archive.get(name)
        if a.shape != tuple(shape):
            raise ArchiveError(
                f"entry {name!r} has shape {a.shape}, the model expects {tuple(shape)}"
            )
        return a

    def conv(self, prefix, shape, *, stride=1, padding=0, groups=1, bias=False) -> ConvParams:
        return ConvParams(
            kernel=self.arr(f"{prefix}.kernel", shape),
            bias=self.arr(f"{prefix}.bias", (shape[0],)) if bias else None,
            stride=stride,
            padding=padding,
            groups=groups,
        )

    def bn(self, prefix, c: int) -> BNParams:
        return BNParams(
            gamma=self.arr(f"{prefix}.gamma", (c,)),
            beta=self.arr(f"{prefix}.beta", (c,)),
            running_mean=self.arr(f"{prefix}.mean", (c,)),
            running_var=self.arr(f"{prefix}.var", (c,)),
        )

    def scalar(self, name: str) -> float:
        return float(self.arr(name, (1,))[0])


@dataclass(frozen=True, eq=False)
class ModelOutputs:
    heatmap: np.ndarray
    sizes: np.ndarray
    offsets: np.ndarray
    mask_logits: np.ndarray
    masks: list[BinaryMask]
    downsample_ratio: int


class Model:
    """Bound, ready-to-run pipeline for one run configuration."""

    def __init__(self, cfg: RunConfig, image_p, radar_p, text_p, adapters, tmdf_p,
                 fpn_p, enmoe_p, rec_p, res_p, fused: bool):
        self.cfg = cfg
        self.image_p = image_p
        self.radar_p = radar_p
        self.text_p = text_p
        self.adapters = adapters
        self.tmdf_p = tmdf_p
        self.fpn_p = fpn_p
        self.enmoe_p = enmoe_p
        self.rec_p = rec_p
        self.res_p = res_p
        self.fused = fused

    @classmethod
    def from_archive(cls, cfg: RunConfig, archive: WeightArchive, mode: str = "auto") -> "Model":
        if mode not in ("auto", "train", "fused"):
            raise ValueError(f"mode must be auto, train or fused, got {mode!r}")
        fused_present = "res.msrep5.fused.kernel" in archive
        if mode == "auto":
            mode = "fused" if fused_present else "train"
        if mode == "fused" and not fused_present:
            raise ArchiveError("archive holds no fused segmentation blocks; run fuse-rep first")
        if mode == "train" and fused_present:
            raise ArchiveError("archive holds fused segmentation blocks; trainable form is gone")
        b = _Binder(archive)
        ch = cfg.stage_channels
        f = cfg.fpn_channels
        e = cfg.embed_dim

        def sep(prefix, cin, cout, stride=2) -> SeparableDown:
            return SeparableDown(
                dw=b.conv(f"{prefix}.dw", (cin, 1, 3, 3), stride=stride, padding=1, groups=cin),
                pw=b.conv(f"{prefix}.pw", (cout, cin, 1, 1)),
                bn=b.bn(f"{prefix}.bn", cout),
            )

        image_p = ImageEncoderParams(
            stem=sep("img_enc.stem", 3, ch[0]),
            stages=tuple(
                sep(f"img_enc.stage{i}", ch[0] if i == 0 else ch[i - 1], ch[i]) for i in range(4)
            ),
        )

        stages = []
        for i in range(4):
            cin = 3 if i == 0 else ch[i - 1]
            stages.append(
                RadarStage(
                    block1_dw=b.conv(f"radar_enc.stage{i}.block1.dw", (cin, 1, 3, 3), padding=1, groups=cin),
                    block1_bn=b.bn(f"radar_enc.stage{i}.block1.bn", cin),
                    block2_dw=b.conv(f"radar_enc.stage{i}.block2.dw", (cin, 1, 3, 3), padding=1, groups=cin),
                    block2_bn=b.bn(f"radar_enc.stage{i}.block2.bn", cin),
                    down=sep(f"radar_enc.stage{i}.down", cin, ch[i]),
                )
            )
        radar_p = RadarEncoderParams(
            stem_dw=b.conv("radar_enc.stem.dw", (3, 1, 3, 3), stride=2, padding=1, groups=3),
            stem_bn=b.bn("radar_enc.stem.bn", 3),
            stages=tuple(stages),
        )

        text_p = TextEncoderParams(embedding=b.arr("text_enc.embedding", (cfg.text_vocab, e)))
        adapters = tuple(
            (
                b.arr(f"text_adapt.stage{i}.weight", (ch[i], e)),
                b.arr(f"text_adapt.stage{i}.bias", (ch[i],)),
            )
            for i in range(4)
        )

        tmdf_p = []
        for i in range(4):
            c = ch[i]
            side = cfg.stage_size(i)
            p = f"tmdf.stage{i}"
            tmdf_p.append(
                TmdfParams(
                    w_img=b.conv(f"{p}.w_img", (c, 1, 1, 1), groups=c),
                    w_radar=b.conv(f"{p}.w_radar", (c, 1, 1, 1), groups=c),
                    eca=EcaParams(weights=b.arr(f"{p}.eca.weights", (3,))),
                    deform=DeformParams(
                        offset_conv=b.conv(f"{p}.deform.offset", (18, c, 3, 3), padding=1, bias=True),
                        main=b.conv(f"{p}.deform.main", (c, c, 3, 3), padding=1, bias=True),
                    ),
                    lpe=b.arr(f"{p}.lpe", (1, c, side, side)),
                    w_text=b.arr(f"{p}.w_text.weight", (c, c)),
                    w_text_bias=b.arr(f"{p}.w_text.bias", (c,)),
                    ape=sinusoidal_encoding(c, cfg.text_len),
                    d=c,
                )
            )

        fpn_p = FpnParams(
            lateral=tuple(
                b.conv(f"fpn.lateral{l}", (f, ch[i], 1, 1), bias=True)
                for i, l in enumerate((2, 3, 4, 5))
            ),
            smooth=tuple(
                b.conv(f"fpn.smooth{l}", (f, f, 3, 3), padding=1, bias=True)
                for l in (2, 3, 4, 5)
            ),
        )

        enmoe_p = []
        for i in range(4):
            p = f"enmoe.stage{i}"
            enmoe_p.append(
                EnMoeParams(
                    edge_conv=b.conv(f"{p}.edge", (f, 1, 1, 1), groups=f),
                    edge_bn=b.bn(f"{p}.edge_bn", f),
                    nbr_conv=b.conv(f"{p}.nbr", (f, 1, 5, 5), padding=2, groups=f),
                    nbr_bn=b.bn(f"{p}.nbr_bn", f),
                    gate_high=b.conv(f"{p}.gate_h", (f, f, 1, 1), bias=True),
                    gate_low=b.conv(f"{p}.gate_l", (f, f, 1, 1), bias=True),
                    w_o=b.conv(f"{p}.w_o", (f, f, 1, 1), bias=True),
                    theta1_raw=b.scalar(f"{p}.theta1_raw"),
                    theta2_raw=b.scalar(f"{p}.theta2_raw"),
                )
            )

        def branch(prefix, out) -> BranchParams:
            return BranchParams(
                dw=b.conv(f"{prefix}.dw", (f, 1, 3, 3), padding=1, groups=f),
                dw_bn=b.bn(f"{prefix}.dw_bn", f),
                pw=b.conv(f"{prefix}.pw", (f, f, 1, 1)),
                pw_bn=b.bn(f"{prefix}.pw_bn", f),
                proj=b.conv(f"{prefix}.proj", (out, f, 1, 1), bias=True),
            )

        rec_p = RecHeadParams(
            conf=branch("rec.conf", 1),
            wh=branch("rec.wh", 2),
            offset=branch("rec.offset", 2),
            downsample_ratio=cfg.input_size // cfg.stage_size(cfg.head_scale - 2),
        )

        blocks = []
        for level in _MSREP_LEVELS:
            p = f"res.msrep{level}"
            if mode == "fused":
                blocks.append(
                    MsRepParams(
                        fused=b.conv(f"{p}.fused", (f, 1, 3, 3), padding=1, groups=f, bias=True)
                    )
                )
            else:
                blocks.append(
                    MsRepParams(
                        conv3=b.conv(f"{p}.conv3", (f, 1, 3, 3), padding=1, groups=f),
                        bn3=b.bn(f"{p}.bn3", f),
                        conv1=b.conv(f"{p}.conv1", (f, 1, 1, 1), groups=f),
                        bn1=b.bn(f"{p}.bn1", f),
                        bn_id=b.bn(f"{p}.bnid", f),
                    )
                )
        res_p = ResHeadParams(
            entry=b.conv("res.entry", (f, 1, 1, 1), groups=f),
            blocks=tuple(blocks),
            proj=b.conv("res.proj", (1, f, 1, 1), bias=True),
        )
        return cls(cfg, image_p, radar_p, text_p, adapters, tmdf_p, fpn_p, enmoe_p,
                   rec_p, res_p, fused=(mode == "fused"))

    def forward(self, image, radar, tokens: TokenSequence) -> ModelOutputs:
        cfg = self.cfg
        img_stages = image_encoder(image, self.image_p)
        rad_stages = radar_encoder(radar, self.radar_p)
        text = text_encoder(tokens, self.text_p)  # (E, L)
        fused_stages = []
        for i in range(4):
            weight, bias = self.adapters[i]
            stage_text = (
                weight.astype(np.float64) @ text.astype(np.float64)
                + bias.astype(np.float64)[:, None]
            ).astype(np.float32)
            fused_stages.append(
                tmdf_fuse(
                    img_stages[i],
                    rad_stages[i],
                    stage_text,
                    self.tmdf_p[i],
                    normalize=cfg.attention_normalize,
                )
            )
        pyramid = fpn_forward(fused_stages, self.fpn_p)
        routed = [
            enmoe_forward(level, self.enmoe_p[i])
            if min(level.shape[2:]) >= MIN_EXTENT
            else level
            for i, level in enumerate(pyramid)
        ]
        feat = routed[cfg.head_scale - 2]
        heat, sizes, offsets = rec_head_forward(feat, self.rec_p)
        logits, masks = res_head_forward(routed, self.res_p, cfg.input_size, cfg.mask_thresh)
        ratio = cfg.input_size // heat.shape[3]
        return ModelOutputs(
            heatmap=heat,
            sizes=sizes,
            offsets=offsets,
            mask_logits=logits,
            masks=masks,
            downsample_ratio=ratio,
        )


# ---------------------------------------------------------------------------
# archive-level reparameterization
# ---------------------------------------------------------------------------


def fuse_archive(archive: WeightArchive) -> WeightArchive:
    """Fold every msrep block of an archive; branch keys are dropped."""
    if "res.msrep5.fused.kernel" in archive:
        raise ArchiveError("archive is already fused")
    b = _Binder(archive)
    entries = dict(archive.entries)
    for level in _MSREP_LEVELS:
        p = f"res.msrep{level}"
        kernel = archive.get(f"{p}.conv3.kernel")
        f = kernel.shape[0]
        block = MsRepParams(
            conv3=b.conv(f"{p}.conv3", (f, 1, 3, 3), padding=1, groups=f),
            bn3=b.bn(f"{p}.bn3", f),
            conv1=b.conv(f"{p}.conv1", (f, 1, 1, 1), groups=f),
            bn1=b.bn(f"{p}.bn1", f),
            bn_id=b.bn(f"{p}.bnid", f),
        )
        fused = msrep_fuse(block)
        entries[f"{p}.fused.kernel"] = fused.fused.kernel
        entries[f"{p}.fused.bias"] = fused.fused.bias
        for key in list(entries):
            if key.startswith(f"{p}.conv") or key.startswith(f"{p}.bn"):
                del entries[key]
    return WeightArchive(entries=entries)


# ---------------------------------------------------------------------------
# one-shot inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InferResult:
    boxes: list[DetectionBox]
    mask: BinaryMask
    boxes_path: Path
    mask_path: Path


def run_infer(
    cfg: RunConfig,
    archive: WeightArchive,
    image_path: str | Path,
    radar_path: str | Path,
    prompt_path: str | Path,
    out_dir: str | Path,
    mode: str = "auto",
) -> InferResult:
    """Load inputs, run the pipeline once and write boxes + mask files."""
    vocab = load_vocab(cfg.vocab_path) if cfg.vocab_path else list(DEFAULT_VOCAB)
    if len(vocab) != cfg.text_vocab:
        raise ValueError(
            f"vocabulary has {len(vocab)} tokens but the run configuration expects {cfg.text_vocab}"
        )
    model = Model.from_archive(cfg, archive, mode=mode)
    image = read_image(image_path, cfg.input_size)[None]
    radar = read_radar(radar_path, cfg.input_size)[None]
    prompt = Path(prompt_path).read_text(encoding="utf-8")
    tokens = tokenize(prompt, vocab, cfg.text_len)
    out = model.forward(image, radar, tokens)
    boxes = decode_boxes(
        out.heatmap[0],
        out.sizes[0],
        out.offsets[0],
        r=out.downsample_ratio,
        k=cfg.topk,
        score_thresh=cfg.score_thresh,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    boxes_path = out_dir / "boxes.txt"
    mask_path = out_dir / "mask.pgm"
    write_boxes(boxes_path, boxes)
    write_mask(mask_path, out.masks[0])
    return InferResult(boxes=boxes, mask=out.masks[0], boxes_path=boxes_path, mask_path=mask_path)


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def generate_fixtures(out_dir: str | Path, cfg: RunConfig, seed: int | None = None) -> dict[str, Path]:
    """Write a self-consistent demo set: weights, inputs, vocab and a trace."""
    from .archive import save_archive  # local import keeps module load light

    seed = cfg.seed if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng((seed, 0xF1C))
    side = cfg.input_size

    paths = {}
    vocab = list(DEFAULT_VOCAB)
    paths["vocab"] = out / "vocab.txt"
    paths["vocab"].write_text("\n".join(vocab) + "\n", encoding="utf-8")

    archive = generate_archive(replace(cfg, text_vocab=len(vocab)), seed)
    paths["weights"] = out / "weights.nmvg"
    save_archive(archive, paths["weights"])

    paths["image"] = out / "image.ppm"
    write_ppm(paths["image"], rng.integers(0, 256, size=(3, side, side)).astype(np.uint8))

    paths["radar"] = out / "radar.f32"
    write_radar_raw(paths["radar"], rng.standard_normal((3, side, side)).astype(np.float32))

    paths["prompt"] = out / "prompt.txt"
    paths["prompt"].write_text("the fast red vessel near the buoy\n", encoding="utf-8")

    paths["config"] = out / "run.cfg"
    paths["config"].write_text(
        "\n".join(
            [
                f"input_size = {cfg.input_size}",
                "stage_channels = " + ",".join(str(c) for c in cfg.stage_channels),
                f"fpn_channels = {cfg.fpn_channels}",
                f"embed_dim = {cfg.embed_dim}",
                f"text_vocab = {len(vocab)}",
                f"score_thresh = {cfg.score_thresh}",
            ]
        )
        + "\n",
        encoding="utf-8",
    )

    # A demo energy trace: ten samples, relative power 28 at tau = 10.
    paths["trace"] = out / "trace.csv"
    rows = ["sample_id,energy_trained,energy_untrained"]
    rows += [f"s{i},50.0,22.0" for i in range(10)]
    paths["trace"].write_text("\n".join(rows) + "\n", encoding="utf-8")

    # Demo annotations usable on both sides of an evaluation.
    boxes = [
        DetectionBox(cx=side * 0.3, cy=side * 0.4, w=side * 0.2, h=side * 0.15, score=0.9),
        DetectionBox(cx=side * 0.7, cy=side * 0.6, w=side * 0.25, h=side * 0.2, score=0.8),
    ]
    paths["boxes"] = out / "boxes.txt"
    write_boxes(paths["boxes"], boxes)
    bitmap = np.zeros((side, side), dtype=np.uint8)
    bitmap[side // 4 : side // 2, side // 4 : side // 2] = 1
    paths["mask"] = out / "mask.pgm"
    write_mask(paths["mask"], BinaryMask(bitmap=bitmap, threshold=0.0))
    return paths
