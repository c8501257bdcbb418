"""Generator, discriminator and perceptual networks, plus checkpoint I/O.

The generator encodes each raw segment vector with a small MLP, pools the
segment features into running means, runs a two-layer LSTM over the pooled
sequence and adds a projected residual to the last pooled feature. Four
variants share the same parts and differ only in routing:

========== ===========================================
``scp``      classify(m_k)
``lstm``     classify(proj(LSTM(f_1..f_k)))
``lstm-scp`` classify(proj(LSTM(m_1..m_k)))
``full``     classify(m_k + proj(LSTM(m_1..m_k)))
========== ===========================================

Internally sequences are time-major ``(T, B, d)``. Because the LSTM and the
pooling are causal, a batch of partial views can be computed from the
complete sequences by reading every row out at its own progress level.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import _kernels
from .diffcore import Dense, DimensionError, LstmStack, Mlp, Parameter, softmax_rows

VARIANTS = ("scp", "lstm", "lstm-scp", "full")

CKPT_MAGIC = b"EAPCKPT\x00"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelDims:
    d_raw: int = 32
    d_feat: int = 64
    d_hidden: int = 32
    d_enc: int = 64
    n_classes: int = 8
    n_segments: int = 10
    widths: tuple[int, int] = (128, 64)
    lstm_layers: int = 2
    # start the residual branch at zero so the full variant begins as plain pooling
    zero_residual: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


# Sizes used at full scale (1024-d segment features, 1024 LSTM units, 4096/1024 heads).
PAPER_DIMS = {"d_feat": 1024, "d_hidden": 1024, "widths": (4096, 1024), "n_segments": 10}


def _time_major(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[None]
    return np.ascontiguousarray(raw.transpose(1, 0, 2))


class GeneratorNet:
    def __init__(self, dims: ModelDims, variant: str, rng: np.random.Generator):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.dims = dims
        self.variant = variant
        self.encoder = Mlp([dims.d_raw, dims.d_enc, dims.d_feat], rng, "encoder", hidden="relu")
        self.lstm: LstmStack | None = None
        self.proj: Dense | None = None
        if variant != "scp":
            self.lstm = LstmStack(dims.d_feat, dims.d_hidden, dims.lstm_layers, rng, "lstm")
            self.proj = Dense(dims.d_hidden, dims.d_feat, rng, "residual")
            if dims.zero_residual:
                self.proj.W.value[:] = 0.0

    def encoder_parameters(self) -> list[Parameter]:
        return self.encoder.parameters()

    def sequence_parameters(self) -> list[Parameter]:
        if self.lstm is None:
            return []
        return self.lstm.parameters() + self.proj.parameters()

    def parameters(self) -> list[Parameter]:
        return self.encoder_parameters() + self.sequence_parameters()

    def encode(self, raw_tm: np.ndarray):
        T, B, d_raw = raw_tm.shape
        if T == 0:
            raise ValueError("cannot encode an empty segment sequence")
        if d_raw != self.dims.d_raw:
            raise DimensionError(f"encoder expects d_raw={self.dims.d_raw}, got segments of width {d_raw}")
        flat, cache = self.encoder.forward(raw_tm.reshape(T * B, d_raw))
        return flat.reshape(T, B, -1), cache

    def forward(self, raw_tm: np.ndarray, k: np.ndarray):
        """Features of every row of ``raw_tm`` observed up to its own level ``k`` (1-based)."""
        k = np.asarray(k, dtype=np.int64)
        T, B, _ = raw_tm.shape
        if k.shape != (B,) or k.min() < 1 or k.max() > T:
            raise ValueError(f"progress levels must lie in [1, {T}] for each of {B} rows")
        T = int(k.max())
        # Rows sorted by decreasing level so the recurrence can drop finished rows.
        order = np.argsort(-k, kind="stable")
        k = k[order]
        raw_tm = raw_tm[:T, order]
        F, enc_cache = self.encode(raw_tm)
        M = _kernels.prefix_mean(F)
        idx, rows = k - 1, np.arange(B)
        cache = {"T": T, "B": B, "idx": idx, "rows": rows, "order": order, "enc": enc_cache}
        if self.variant == "scp":
            out = M[idx, rows]
        else:
            active = (k[None, :] > np.arange(T)[:, None]).sum(axis=1)
            seq = F if self.variant == "lstm" else M
            H, lstm_cache = self.lstm.forward(seq, active)
            h_last = H[idx, rows]
            out = h_last @ self.proj.W.value + self.proj.b.value
            cache.update(lstm=lstm_cache, h_last=h_last)
            if self.variant == "full":
                out = out + M[idx, rows]
        unsorted = np.empty_like(out)
        unsorted[order] = out
        return unsorted, cache

    def backward(self, dout: np.ndarray, cache, encoder: bool = True) -> None:
        """Accumulate parameter gradients; the encoder is skipped when ``encoder`` is False."""
        T, B, idx, rows = cache["T"], cache["B"], cache["idx"], cache["rows"]
        dout = dout[cache["order"]]
        d_feat = self.dims.d_feat
        dM = np.zeros((T, B, d_feat)) if encoder else None
        dF = None
        if encoder and self.variant in ("scp", "full"):
            dM[idx, rows] += dout
        if self.variant != "scp":
            dh_last = self.proj.backward(dout, cache["h_last"])
            dH = np.zeros((T, B, self.lstm.d_h))
            dH[idx, rows] = dh_last
            dseq = self.lstm.backward(dH, cache["lstm"], need_dx=encoder)
            if encoder:
                if self.variant == "lstm":
                    dF = dseq
                else:
                    dM += dseq
        if not encoder:
            return
        dFt = _kernels.prefix_mean_backward(dM)
        if dF is not None:
            dFt = dFt + dF
        self.encoder.backward(dFt.reshape(T * B, d_feat), cache["enc"], need_dx=False)

    def features_all(self, raw_tm: np.ndarray) -> np.ndarray:
        """Features at every progress level, shape ``(T, B, d_feat)``."""
        F, _ = self.encode(raw_tm)
        M = _kernels.prefix_mean(F)
        if self.variant == "scp":
            return M
        H, _ = self.lstm.forward(F if self.variant == "lstm" else M)
        T, B, _ = H.shape
        R = (H.reshape(T * B, -1) @ self.proj.W.value + self.proj.b.value).reshape(T, B, -1)
        return R + M if self.variant == "full" else R

    def full_features(self, raw_tm: np.ndarray):
        """Pooled feature of complete sequences (last prefix mean), with cache for backward."""
        F, enc_cache = self.encode(raw_tm)
        return _kernels.prefix_mean(F)[-1], (F.shape[0], F.shape[1], enc_cache)

    def full_features_backward(self, dz: np.ndarray, cache) -> None:
        T, B, enc_cache = cache
        dF = np.broadcast_to(dz / T, (T, B, dz.shape[1])).reshape(T * B, -1)
        self.encoder.backward(np.ascontiguousarray(dF), enc_cache, need_dx=False)


class DiscriminatorNet:
    """Two hidden relu layers and a single sigmoid unit."""

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        h1, h2 = dims.widths
        self.mlp = Mlp([dims.d_feat, h1, h2, 1], rng, "disc", hidden="relu", final="sigmoid")

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()

    def forward(self, feat: np.ndarray):
        out, cache = self.mlp.forward(feat)
        return out[:, 0], cache

    def backward(self, dprob: np.ndarray, cache, need_dx: bool = True):
        return self.mlp.backward(dprob[:, None], cache, need_dx=need_dx)


class PerceptualNet:
    """Two hidden relu layers and a softmax classification layer."""

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        h1, h2 = dims.widths
        self.mlp = Mlp([dims.d_feat, h1, h2, dims.n_classes], rng, "perc", hidden="relu", final="softmax")

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()

    def logits(self, feat: np.ndarray):
        return self.mlp.forward(feat, final="identity")

    def backward_logits(self, dlogits: np.ndarray, cache, need_dx: bool = True):
        return self.mlp.backward(dlogits, cache, need_dx=need_dx)

    def forward(self, feat: np.ndarray) -> np.ndarray:
        logits, _ = self.logits(feat)
        return softmax_rows(logits)


@dataclass
class ModelBundle:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    perceptual: PerceptualNet
    dims: ModelDims
    variant: str
    config: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def create(cls, dims: ModelDims | None = None, variant: str = "full", seed: int = 0,
               config: dict[str, Any] | None = None) -> "ModelBundle":
        dims = dims or ModelDims()
        rng = np.random.default_rng(seed)
        g = GeneratorNet(dims, variant, rng)
        d = DiscriminatorNet(dims, rng)
        p = PerceptualNet(dims, rng)
        return cls(g, d, p, dims, variant, dict(config or {}))

    def named_parameters(self) -> list[Parameter]:
        return self.generator.parameters() + self.perceptual.parameters() + self.discriminator.parameters()

    def parameter_count(self) -> dict[str, int]:
        g, d, p = self.generator, self.discriminator, self.perceptual
        return {
            "encoder": sum(q.size for q in g.encoder_parameters()),
            "sequence": sum(q.size for q in g.sequence_parameters()),
            "discriminator": sum(q.size for q in d.parameters()),
            "perceptual": sum(q.size for q in p.parameters()),
        }

    def scores(self, raw: np.ndarray, k) -> np.ndarray:
        """Class scores for a batch ``(B, T, d_raw)`` observed up to levels ``k``."""
        raw_tm = _time_major(raw)
        k = np.broadcast_to(np.asarray(k, dtype=np.int64), (raw_tm.shape[1],))
        feat, _ = self.generator.forward(raw_tm, k)
        return self.perceptual.forward(feat)

    def scores_all(self, raw: np.ndarray) -> np.ndarray:
        """Class scores at every level, shape ``(T, B, C)``."""
        raw_tm = _time_major(raw)
        T, B, _ = raw_tm.shape
        feats = self.generator.features_all(raw_tm)
        return self.perceptual.forward(feats.reshape(T * B, -1)).reshape(T, B, -1)

    def copy(self) -> "ModelBundle":
        other = ModelBundle.create(self.dims, self.variant, 0, self.config)
        for dst, src in zip(other.named_parameters(), self.named_parameters()):
            dst.value[...] = src.value
        return other


# ---------------------------------------------------------------------------
# single-sequence operations
# ---------------------------------------------------------------------------


def _segments(x) -> np.ndarray:
    seg = getattr(x, "segments", x)
    seg = np.asarray(seg, dtype=np.float64)
    if seg.ndim != 2:
        raise DimensionError(f"expected a (k, d) segment matrix, got shape {seg.shape}")
    if seg.shape[0] == 0:
        raise ValueError("empty input: at least one segment is required")
    return seg


def encode_segments(raw, g: GeneratorNet) -> np.ndarray:
    seg = _segments(raw)
    F, _ = g.encode(seg[:, None, :])
    return F[:, 0, :]


def sequential_context_pool(f: np.ndarray) -> np.ndarray:
    """Row ``i`` is the mean of rows ``0..i`` of ``f``."""
    f = _segments(f)
    return _kernels.prefix_mean(f[:, None, :])[:, 0, :]


def generate_enhanced(view, g: GeneratorNet) -> np.ndarray:
    """Generator output for a partial view (``m_k + r`` for the full variant)."""
    seg = _segments(view)
    out, _ = g.forward(seg[:, None, :], np.array([seg.shape[0]]))
    return out[0]


def full_video_feature(seq, g: GeneratorNet) -> np.ndarray:
    seg = _segments(seq)
    if seg.shape[0] != g.dims.n_segments:
        raise ValueError(f"incomplete sequence: {seg.shape[0]} of {g.dims.n_segments} segments")
    return sequential_context_pool(encode_segments(seg, g))[-1]


def discriminate(feat: np.ndarray, d: DiscriminatorNet) -> np.ndarray:
    out, _ = d.forward(np.atleast_2d(feat))
    return out


def classify(feat: np.ndarray, p: PerceptualNet) -> np.ndarray:
    return p.forward(np.atleast_2d(feat))


def predict(view, bundle: ModelBundle) -> tuple[int, np.ndarray]:
    """Label and class scores for one partial view. Never touches the discriminator."""
    seg = _segments(view)
    scores = bundle.scores(seg[None], seg.shape[0])[0]
    return int(np.argmax(scores)), scores


def fuse_scores(s_a: np.ndarray, s_b: np.ndarray):
    """Sum two streams' class scores; returns the fused label(s) (arg-max over the last axis) and scores."""
    s_a = np.asarray(s_a, dtype=np.float64)
    s_b = np.asarray(s_b, dtype=np.float64)
    if s_a.shape != s_b.shape:
        raise DimensionError(f"cannot fuse scores of shapes {s_a.shape} and {s_b.shape}")
    fused = s_a + s_b
    labels = fused.argmax(axis=-1)
    return (int(labels) if labels.ndim == 0 else labels), fused


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, bundle: ModelBundle) -> None:
    params = bundle.named_parameters()
    header = {
        "variant": bundle.variant,
        "dims": bundle.dims.to_dict(),
        "config": bundle.config,
        "params": [{"name": p.name, "shape": list(p.shape)} for p in params],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(p.value.astype("<f8").tobytes() for p in params)
    body = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hbytes)) + hbytes + payload
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> ModelBundle:
    blob = Path(path).read_bytes()
    if len(blob) < len(CKPT_MAGIC) + 12 or blob[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = len(CKPT_MAGIC) + 8
    header = json.loads(body[off: off + hlen].decode("utf-8"))
    off += hlen
    dims = ModelDims(**header["dims"])
    bundle = ModelBundle.create(dims, header["variant"], 0, header.get("config", {}))
    params = bundle.named_parameters()
    if [p.name for p in params] != [e["name"] for e in header["params"]]:
        raise CheckpointError(f"{path}: parameter layout does not match variant {header['variant']!r}")
    for p, entry in zip(params, header["params"]):
        if list(p.shape) != entry["shape"]:
            raise CheckpointError(f"{path}: {p.name} has shape {entry['shape']}, expected {list(p.shape)}")
        n = p.size * 8
        if off + n > len(body):
            raise CheckpointError(f"{path}: truncated payload")
        p.value[...] = np.frombuffer(body, dtype="<f8", count=p.size, offset=off).reshape(p.shape)
        off += n
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after payload")
    return bundle
