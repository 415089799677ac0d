"""Thin ResNet-34 trunk, temporal aggregation heads, and checkpoint I/O.

Layer plan (input spectrogram N x 257 x T x 1, NHWC):

    conv 7x7/64  same, stride 1        -> 257 x T
    maxpool 2x2, stride (2,2), valid   -> 128 x T/2
    stage 1: [1x1 48, 3x3 48, 1x1 96]  x 2, stride 1     -> 128 x T/2
    stage 2: [1x1 96, 3x3 96, 1x1 128] x 3, stride 2     ->  64 x T/4
    stage 3: [1x1 128, 3x3 128, 1x1 256] x 3, stride 2   ->  32 x T/8
    stage 4: [1x1 256, 3x3 256, 1x1 512] x 3, stride 2   ->  16 x T/16
    maxpool 3x1, stride (2,2), valid   ->   7 x T/32
    conv 7x1/512 valid                 ->   1 x T/32   (frame descriptors)

Every conv is followed by batch-norm then ReLU; inside a bottleneck the
residual add sits before the final ReLU (post-activation ResNet), and the
stride-2 downsampling lives on the 3x3 conv plus a 1x1 projection shortcut.
All 3x3/7x7 convs use same padding (ceil rounding on stride 2), both pools
are valid; this reproduces every extent above, including T'=8 for T=250.

Parameter accounting: ``trunk_parameter_count`` covers stem + stages, the
residual feature extractor proper. The 7x1 frame projection (1.8M weights
at full width) is reported separately — including it would put the "trunk"
near 5.5M, which matches no published description of this architecture's
size, while stem + stages sits near 3.7M.

Aggregation heads: TAP (plain temporal mean), NetVLAD (softmax-assigned
residuals against learned centres), GhostVLAD (assignment over K + G
clusters, concatenation over the K real ones only). VLAD output is
intra-normalized per cluster row, flattened to K*D, then globally
L2-normalized; a final FC maps to the embedding dimension.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as t
from .audio import Spectrogram
from .tensor import Tensor, BatchNormState

CHECKPOINT_MAGIC = b"VLDN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrunkConfig:
    """Channel plan of the frame-level feature extractor."""

    stem_width: int = 64
    stage_widths: tuple = ((48, 96), (96, 128), (128, 256), (256, 512))
    block_counts: tuple = (2, 3, 3, 3)
    frame_width: int = 512       # output channels of the 7x1 projection
    width_multiplier: float = 1.0

    def __post_init__(self):
        if self.stem_width < 1 or self.frame_width < 1:
            raise ValueError("trunk widths must be positive")
        if len(self.stage_widths) != len(self.block_counts):
            raise ValueError("stage_widths and block_counts disagree")
        if self.width_multiplier <= 0:
            raise ValueError("width multiplier must be positive")

    def scaled(self, width: int) -> int:
        return max(1, round(width * self.width_multiplier))


@dataclass(frozen=True)
class ModelConfig:
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    aggregation: str = "ghostvlad"   # "tap" | "netvlad" | "ghostvlad"
    clusters: int = 8
    ghost_clusters: int = 2
    embed_dim: int = 512
    num_classes: int = 0             # 0: no classifier head (scoring-only model)
    classifier: str = "cosine"       # "cosine" (margin losses) | "linear" (plain softmax)
    dtype: str = "float32"

    def __post_init__(self):
        if self.aggregation not in ("tap", "netvlad", "ghostvlad"):
            raise ValueError(f"unknown aggregation '{self.aggregation}'")
        if self.clusters < 1 or self.ghost_clusters < 0:
            raise ValueError("cluster counts out of range")
        if self.aggregation == "netvlad" and self.ghost_clusters != 0:
            raise ValueError("netvlad aggregation requires ghost_clusters == 0")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")
        if self.classifier not in ("cosine", "linear"):
            raise ValueError(f"unknown classifier '{self.classifier}'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def _config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def _config_from_dict(d: dict) -> ModelConfig:
    trunk = d["trunk"]
    return ModelConfig(
        trunk=TrunkConfig(
            stem_width=trunk["stem_width"],
            stage_widths=tuple(tuple(w) for w in trunk["stage_widths"]),
            block_counts=tuple(trunk["block_counts"]),
            frame_width=trunk["frame_width"],
            width_multiplier=trunk["width_multiplier"],
        ),
        **{k: d[k] for k in ("aggregation", "clusters", "ghost_clusters",
                             "embed_dim", "num_classes", "classifier", "dtype")},
    )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _uniform_init(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    """Conv without bias (batch-norm always follows)."""

    def __init__(self, kh, kw, cin, cout, stride=(1, 1), padding="same", *, rng, dtype):
        self.stride = stride
        self.padding = padding
        self.weight = t.parameter(_uniform_init(rng, (kh, kw, cin, cout), kh * kw * cin, dtype))

    def __call__(self, x):
        return t.conv2d(x, self.weight, self.stride, self.padding)

    def named_params(self, prefix):
        yield prefix + ".weight", self.weight

    def named_buffers(self, prefix):
        return ()


class BatchNorm2d:
    def __init__(self, channels, *, dtype):
        self.gamma = t.parameter(np.ones(channels, dtype=dtype))
        self.beta = t.parameter(np.zeros(channels, dtype=dtype))
        self.state = BatchNormState(channels, dtype=dtype)

    def __call__(self, x, training, update_stats=None):
        return t.batchnorm2d(x, self.gamma, self.beta, self.state,
                             training, update_stats=update_stats)

    def named_params(self, prefix):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".beta", self.beta

    def named_buffers(self, prefix):
        yield prefix + ".running_mean", self.state.mean
        yield prefix + ".running_var", self.state.var


class ConvBn:
    def __init__(self, kh, kw, cin, cout, stride=(1, 1), padding="same", *, rng, dtype):
        self.conv = Conv2d(kh, kw, cin, cout, stride, padding, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def __call__(self, x, training, update_stats=None):
        return self.bn(self.conv(x), training, update_stats)

    def named_params(self, prefix):
        yield from self.conv.named_params(prefix + ".conv")
        yield from self.bn.named_params(prefix + ".bn")

    def named_buffers(self, prefix):
        yield from self.bn.named_buffers(prefix + ".bn")


class Linear:
    def __init__(self, din, dout, *, rng, dtype, bias=True):
        self.weight = t.parameter(_uniform_init(rng, (din, dout), din, dtype))
        self.bias = t.parameter(np.zeros(dout, dtype=dtype)) if bias else None

    def __call__(self, x):
        return t.linear(x, self.weight, self.bias)

    def named_params(self, prefix):
        yield prefix + ".weight", self.weight
        if self.bias is not None:
            yield prefix + ".bias", self.bias

    def named_buffers(self, prefix):
        return ()


class CosineClassifier:
    """Class-weight rows scored by cosine (margin losses normalize them per use)."""

    def __init__(self, num_classes, dim, *, rng, dtype):
        self.weight = t.parameter(_uniform_init(rng, (num_classes, dim), dim, dtype))

    def named_params(self, prefix):
        yield prefix + ".weight", self.weight

    def named_buffers(self, prefix):
        return ()


class Bottleneck:
    """[1x1 mid, 3x3 mid (stride), 1x1 out] with projection shortcut when needed."""

    def __init__(self, cin, mid, cout, stride, *, rng, dtype):
        self.a = ConvBn(1, 1, cin, mid, rng=rng, dtype=dtype)
        self.b = ConvBn(3, 3, mid, mid, stride=(stride, stride), rng=rng, dtype=dtype)
        self.c = ConvBn(1, 1, mid, cout, rng=rng, dtype=dtype)
        if cin != cout or stride != 1:
            self.shortcut = ConvBn(1, 1, cin, cout, stride=(stride, stride),
                                   rng=rng, dtype=dtype)
        else:
            self.shortcut = None

    def __call__(self, x, training, update_stats=None):
        y = t.relu(self.a(x, training, update_stats))
        y = t.relu(self.b(y, training, update_stats))
        y = self.c(y, training, update_stats)
        sc = x if self.shortcut is None else self.shortcut(x, training, update_stats)
        return t.relu(t.add(y, sc))

    def named_params(self, prefix):
        yield from self.a.named_params(prefix + ".a")
        yield from self.b.named_params(prefix + ".b")
        yield from self.c.named_params(prefix + ".c")
        if self.shortcut is not None:
            yield from self.shortcut.named_params(prefix + ".shortcut")

    def named_buffers(self, prefix):
        yield from self.a.named_buffers(prefix + ".a")
        yield from self.b.named_buffers(prefix + ".b")
        yield from self.c.named_buffers(prefix + ".c")
        if self.shortcut is not None:
            yield from self.shortcut.named_buffers(prefix + ".shortcut")


class ThinResNet:
    """Stem + four bottleneck stages + 3x1 pool + 7x1 frame projection."""

    def __init__(self, cfg: TrunkConfig, *, rng, dtype):
        self.cfg = cfg
        stem = cfg.scaled(cfg.stem_width)
        self.stem = ConvBn(7, 7, 1, stem, rng=rng, dtype=dtype)
        self.stages = []
        cin = stem
        for s, ((mid, out), blocks) in enumerate(zip(cfg.stage_widths, cfg.block_counts)):
            mid, out = cfg.scaled(mid), cfg.scaled(out)
            stage = []
            for b in range(blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                stage.append(Bottleneck(cin, mid, out, stride, rng=rng, dtype=dtype))
                cin = out
            self.stages.append(stage)
        self.frame_width = cfg.scaled(cfg.frame_width)
        self.proj = ConvBn(7, 1, cin, self.frame_width, padding="valid",
                           rng=rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool, update_stats=None,
                 trace: list | None = None) -> Tensor:
        """(N, 257, T, 1) -> (N, T', D) frame descriptors; T' = T // 32 for T >= 32."""
        if x.shape[2] < 32:
            raise ValueError(
                f"input has {x.shape[2]} frames; the downsampling chain needs >= 32")

        def rec(tag, y):
            if trace is not None:
                trace.append((tag, tuple(y.shape)))
            return y

        y = rec("stem", t.relu(self.stem(x, training, update_stats)))
        y = rec("pool1", t.maxpool2d(y, (2, 2), (2, 2)))
        for s, stage in enumerate(self.stages):
            for block in stage:
                y = block(y, training, update_stats)
            y = rec(f"stage{s + 1}", y)
        y = rec("pool2", t.maxpool2d(y, (3, 1), (2, 2)))
        y = rec("proj", t.relu(self.proj(y, training, update_stats)))
        n, h, tt, d = y.shape
        assert h == 1, f"frequency axis not fully reduced: {y.shape}"
        return t.reshape(y, (n, tt, d))

    def named_params(self, prefix="trunk"):
        yield from self.stem.named_params(prefix + ".stem")
        for s, stage in enumerate(self.stages):
            for b, block in enumerate(stage):
                yield from block.named_params(f"{prefix}.stage{s + 1}.block{b}")
        yield from self.proj.named_params(prefix + ".proj")

    def named_buffers(self, prefix="trunk"):
        yield from self.stem.named_buffers(prefix + ".stem")
        for s, stage in enumerate(self.stages):
            for b, block in enumerate(stage):
                yield from block.named_buffers(f"{prefix}.stage{s + 1}.block{b}")
        yield from self.proj.named_buffers(prefix + ".proj")


def build_thin_resnet(cfg: TrunkConfig, rng, dtype=np.float32) -> ThinResNet:
    return ThinResNet(cfg, rng=rng, dtype=dtype)


def trunk_parameter_count(trunk: ThinResNet, include_frame_projection: bool = False) -> int:
    """Parameters of stem + stages (+ optionally the 7x1 frame projection)."""
    skip = "" if include_frame_projection else ".proj."
    total = 0
    for name, p in trunk.named_params():
        if skip and skip in name:
            continue
        total += p.size
    return total


# ---------------------------------------------------------------------------
# aggregation heads
# ---------------------------------------------------------------------------

class VladParams:
    """Assignment weights/biases and centres for K real + G ghost clusters."""

    def __init__(self, clusters: int, ghost_clusters: int, dim: int, *, rng, dtype):
        if clusters < 1 or ghost_clusters < 0:
            raise ValueError("cluster counts out of range")
        self.k = clusters
        self.g = ghost_clusters
        self.dim = dim
        total = clusters + ghost_clusters
        self.w = t.parameter((rng.standard_normal((total, dim)) * 0.1).astype(dtype))
        self.b = t.parameter((rng.standard_normal(total) * 0.1).astype(dtype))
        self.c = t.parameter((rng.standard_normal((total, dim)) * 0.1).astype(dtype))

    def named_params(self, prefix="head.vlad"):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b
        yield prefix + ".c", self.c


def _as_batch(features: Tensor) -> tuple[Tensor, bool]:
    if features.ndim == 2:
        return t.reshape(features, (1,) + features.shape), True
    if features.ndim == 3:
        return features, False
    raise ValueError(f"features must be (T', D) or (N, T', D), got {features.shape}")


def _vlad(features: Tensor, params: VladParams, intra_norm: bool) -> Tensor:
    """Shared NetVLAD/GhostVLAD body; assignment over K+G, residuals over K."""
    feats, squeeze = _as_batch(features)
    n, tt, d = feats.shape
    if d != params.dim:
        raise ValueError(f"descriptor dim {d} does not match VLAD dim {params.dim}")
    flat = t.reshape(feats, (n * tt, d))
    logits = t.linear(flat, t.transpose(params.w), params.b)   # (N*T', K+G)
    assign = t.softmax_rows(logits)
    assign_real = t.narrow(assign, 1, 0, params.k)             # drop ghost columns
    a3 = t.transpose(t.reshape(assign_real, (n, tt, params.k)), (0, 2, 1))  # (N, K, T')
    weighted = t.bmm(a3, feats)                                # (N, K, D)
    mass = t.sum_axis(a3, 2)                                   # (N, K)
    centres = t.narrow(params.c, 0, 0, params.k)
    vlad = t.sub(weighted, t.outer_scale(mass, centres))
    if intra_norm:
        vlad = t.l2_normalize(vlad, axis=2)
    out = t.l2_normalize(t.reshape(vlad, (n, params.k * d)), axis=1)
    return t.reshape(out, (params.k * d,)) if squeeze else out


def netvlad_aggregate(features: Tensor, params: VladParams, intra_norm: bool = True) -> Tensor:
    """Softmax-assigned residual aggregation; requires no ghost clusters."""
    if params.g != 0:
        raise ValueError("netvlad_aggregate requires G == 0 (use ghostvlad_aggregate)")
    return _vlad(features, params, intra_norm)


def ghostvlad_aggregate(features: Tensor, params: VladParams, intra_norm: bool = True) -> Tensor:
    """VLAD with G extra assignment-only clusters that absorb irrelevant frames."""
    return _vlad(features, params, intra_norm)


def tap_aggregate(features: Tensor) -> Tensor:
    """Temporal average pooling: plain mean over the frame axis."""
    feats, squeeze = _as_batch(features)
    n, tt, d = feats.shape
    out = t.scale(t.sum_axis(feats, 1), 1.0 / tt)
    return t.reshape(out, (d,)) if squeeze else out


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class SpeakerEmbedder:
    """Trunk -> aggregation -> FC, plus an optional classifier for training."""

    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        dtype = cfg.np_dtype
        self.trunk = ThinResNet(cfg.trunk, rng=rng, dtype=dtype)
        d = self.trunk.frame_width
        if cfg.aggregation == "tap":
            self.vlad = None
            agg_dim = d
        else:
            ghosts = cfg.ghost_clusters if cfg.aggregation == "ghostvlad" else 0
            self.vlad = VladParams(cfg.clusters, ghosts, d, rng=rng, dtype=dtype)
            agg_dim = cfg.clusters * d
        self.fc = Linear(agg_dim, cfg.embed_dim, rng=rng, dtype=dtype)
        if cfg.num_classes == 0:
            self.classifier = None
        elif cfg.classifier == "linear":
            self.classifier = Linear(cfg.embed_dim, cfg.num_classes, rng=rng, dtype=dtype)
        else:
            self.classifier = CosineClassifier(cfg.num_classes, cfg.embed_dim,
                                               rng=rng, dtype=dtype)

    # -- forward pieces ----------------------------------------------------

    def frame_features(self, x: Tensor, training: bool = False,
                       update_stats=None) -> Tensor:
        return self.trunk(x, training, update_stats)

    def aggregate(self, features: Tensor) -> Tensor:
        if self.vlad is None:
            return tap_aggregate(features)
        return ghostvlad_aggregate(features, self.vlad)

    def embedding(self, x: Tensor, training: bool = False, update_stats=None) -> Tensor:
        """FC output before the final L2 normalization, (N, embed_dim)."""
        return self.fc(self.aggregate(self.frame_features(x, training, update_stats)))

    def embed(self, spec: Spectrogram) -> np.ndarray:
        """Unit-norm embedding of one normalized spectrogram (eval mode)."""
        if not spec.normalized:
            raise ValueError("embed expects a normalized spectrogram")
        x = spectrogram_batch([spec], dtype=self.cfg.np_dtype)
        with t.no_grad():
            emb = t.l2_normalize(self.embedding(x, training=False), axis=1)
        return np.ascontiguousarray(emb.data[0])

    # -- parameter plumbing --------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out = dict(self.trunk.named_params("trunk"))
        if self.vlad is not None:
            out.update(self.vlad.named_params("head.vlad"))
        out.update(self.fc.named_params("fc"))
        if self.classifier is not None:
            out.update(self.classifier.named_params("classifier"))
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        return dict(self.trunk.named_buffers("trunk"))

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_params().values())


def build_model(cfg: ModelConfig, seed: int | np.random.Generator = 0) -> SpeakerEmbedder:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return SpeakerEmbedder(cfg, rng)


def spectrogram_batch(specs, dtype=np.float32) -> Tensor:
    """Stack normalized spectrograms (all same T) into an NHWC input tensor."""
    for s in specs:
        if not s.normalized:
            raise ValueError("model input spectrograms must be normalized")
    arr = np.stack([s.values for s in specs])[:, :, :, None].astype(dtype)
    return Tensor(arr)


def frame_features(model: SpeakerEmbedder, spec: Spectrogram) -> np.ndarray:
    """Eval-mode frame descriptors of one utterance, numpy (T', D)."""
    x = spectrogram_batch([spec], dtype=model.cfg.np_dtype)
    with t.no_grad():
        feats = model.frame_features(x, training=False)
    return feats.data[0]


# ---------------------------------------------------------------------------
# checkpoint format: magic "VLDN", u32 version, u64 manifest length,
# UTF-8 JSON manifest, then raw little-endian tensor bytes in manifest order.
# ---------------------------------------------------------------------------

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(model: SpeakerEmbedder, path, optimizer_state=None, step: int = 0) -> None:
    """Serialize config + parameters + buffers (+ Adam moments) bit-exactly."""
    records = []
    blobs = []
    offset = 0

    def push(name, arr):
        nonlocal offset
        arr = np.asarray(arr)
        dtype_name = str(arr.dtype)
        if dtype_name not in _DTYPE_CODES:
            raise ValueError(f"unsupported tensor dtype {dtype_name} for '{name}'")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor '{name}' contains non-finite values")
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[dtype_name]).tobytes()
        records.append({"name": name, "shape": list(arr.shape),
                        "dtype": dtype_name, "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.named_params().items():
        push(name, p.data)
    for name, buf in model.named_buffers().items():
        push(name, buf)
    opt_meta = None
    if optimizer_state is not None:
        opt_meta = {"step": optimizer_state.step}
        for name in model.named_params():
            m, v = optimizer_state.moments[name]
            push("opt.m." + name, m)
            push("opt.v." + name, v)

    manifest = json.dumps({
        "config": _config_to_dict(model.cfg),
        "step": int(step),
        "optimizer": opt_meta,
        "tensors": records,
    }).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, config: ModelConfig | None = None):
    """Rebuild (model, optimizer_state_dict | None, step) from a checkpoint.

    Passing ``config`` requests that exact architecture; tensors whose stored
    shape disagrees raise a shape-mismatch error naming the tensor.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + mlen:
        raise ValueError("truncated checkpoint: manifest cut short")
    manifest = json.loads(blob[16:16 + mlen].decode("utf-8"))
    data = blob[16 + mlen:]

    stored = {}
    for rec in manifest["tensors"]:
        code = _DTYPE_CODES[rec["dtype"]]
        shape = tuple(rec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * int(code[-1])
        chunk = data[rec["offset"]:rec["offset"] + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"truncated checkpoint: tensor '{rec['name']}' cut short")
        stored[rec["name"]] = np.frombuffer(chunk, dtype=code).reshape(shape).copy()

    cfg = config if config is not None else _config_from_dict(manifest["config"])
    model = build_model(cfg, seed=0)

    def pull(name, target_shape):
        if name not in stored:
            raise ValueError(f"checkpoint is missing tensor '{name}'")
        arr = stored[name]
        if arr.shape != tuple(target_shape):
            raise ValueError(
                f"shape mismatch for tensor '{name}': checkpoint has {arr.shape}, "
                f"requested model needs {tuple(target_shape)}")
        return arr

    for name, p in model.named_params().items():
        p.data = pull(name, p.data.shape).astype(p.data.dtype, copy=False)
    for name, buf in model.named_buffers().items():
        buf[...] = pull(name, buf.shape)

    opt_state = None
    if manifest.get("optimizer") is not None:
        opt_state = {"step": manifest["optimizer"]["step"], "moments": {}}
        for name in model.named_params():
            opt_state["moments"][name] = (stored["opt.m." + name], stored["opt.v." + name])
    return model, opt_state, manifest["step"]
