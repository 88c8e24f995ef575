"""Binary checkpoint persistence for trained receivers.

Layout (little-endian):

    magic          6 bytes  b"GFPIC1"
    version        u32
    kind           u8       1 pilot-only, 2 data-aided, 3 non-coherent, 4 fcnn
    tie_devices    u8
    K, L, tau_coh, J, D, T          u32 each
    n_hidden       u32, then hidden sizes (u32 each)
    n_fcnn_hidden  u32, then fcnn hidden sizes (u32 each)
    n_const        u32, then constellation points (f64 re, f64 im each)
    sigma_gamma, sigma_y_pilot, sigma_y_data, sigma_y_nc   f64 each (0 = unset)
    tau_thr        f64
    seed           i64
    n_tensors      u32
    shape table    per tensor: ndim u8, dims (u32 each)
    payload        float32 raw tensor data

Tensor order: CE stages 1..T (per stage: W1, b1, W2, b2, ...), then DD stages
1..T, then AD; FCNN checkpoints store the CE net then the AD net. Device
stacking is the leading tensor axis (stage-major, device-minor, layer order).

The codebook is not stored: it regenerates deterministically from the config
echo and the stored training seed. Loading validates magic, version, and the
complete shape table against the header before touching the payload.
"""

from __future__ import annotations

import struct
from dataclasses import replace

import numpy as np

from .config import BPSK, COHERENT, NONCOHERENT, SystemConfig
from .neuralcore import ACT_SIGMOID, MlpParams, MlpSpec
from .picnet import DATA_AIDED, NONCOHERENT_PIC, PILOT_ONLY, PicModel, \
    module_layer_sizes
from .prep import Standardizer
from .sysmodel import generate_codebook
from .trainer import FCNN, FcnnModel

MAGIC = b"GFPIC1"
VERSION = 1

_KIND_CODES = {PILOT_ONLY: 1, DATA_AIDED: 2, NONCOHERENT_PIC: 3, FCNN: 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


def _pack_header(model) -> bytes:
    cfg = model.config
    kind = model.kind
    out = [MAGIC, struct.pack("<IBB", VERSION, _KIND_CODES[kind],
                              int(getattr(model, "tie_devices", False)))]
    out.append(struct.pack("<6I", cfg.n_devices, cfg.seq_len, cfg.coherence_len,
                           cfg.n_bits, cfg.n_symbols, cfg.n_stages))
    for sizes in (cfg.hidden_sizes, cfg.fcnn_hidden_sizes):
        out.append(struct.pack("<I", len(sizes)))
        out.append(struct.pack(f"<{len(sizes)}I", *sizes))
    const = cfg.constellation
    out.append(struct.pack("<I", len(const)))
    for c in const:
        out.append(struct.pack("<dd", complex(c).real, complex(c).imag))
    std = model.standardizer
    out.append(struct.pack("<4d", std.sigma_gamma, std.sigma_y_pilot or 0.0,
                           std.sigma_y_data or 0.0, std.sigma_y_nc or 0.0))
    out.append(struct.pack("<dq", model.tau_thr, model.seed))
    return b"".join(out)


def _tensor_list(model) -> list[np.ndarray]:
    tensors: list[np.ndarray] = []
    for group in model.module_params():
        tensors.extend(group.tensors())
    return tensors


def save_checkpoint(model, path: str) -> None:
    """Serialize a PicModel or FcnnModel (single-precision payload)."""
    tensors = _tensor_list(model)
    with open(path, "wb") as fh:
        fh.write(_pack_header(model))
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _expected_groups(kind: str, cfg: SystemConfig, tie: bool):
    """(spec, n_modules) per module group, in the stored tensor order."""
    n_mod = 1 if tie else cfg.n_devices
    if kind == FCNN:
        two_l = 2 * cfg.seq_len
        hidden = cfg.fcnn_hidden_sizes
        return [(MlpSpec((two_l, *hidden, 2 * cfg.n_devices)), 0),
                (MlpSpec((two_l, *hidden, cfg.n_devices),
                         output_activation=ACT_SIGMOID), 0)]
    sizes = module_layer_sizes(kind, cfg)
    groups = [(MlpSpec(sizes["ce"]), n_mod) for _ in range(cfg.n_stages)]
    if kind == PILOT_ONLY:
        groups.append((MlpSpec(sizes["ad"], output_activation=ACT_SIGMOID), n_mod))
    else:
        groups.extend((MlpSpec(sizes["dd"], output_activation=ACT_SIGMOID), n_mod)
                      for _ in range(cfg.n_stages))
    return groups


def _group_shapes(spec: MlpSpec, n_mod: int) -> list[tuple[int, ...]]:
    shapes: list[tuple[int, ...]] = []
    sizes = spec.layer_sizes
    for layer in range(spec.n_layers):
        w = (sizes[layer], sizes[layer + 1])
        b = (sizes[layer + 1],)
        if n_mod:
            w = (n_mod, *w)
            b = (n_mod, *b)
        shapes.append(w)
        shapes.append(b)
    return shapes


def load_checkpoint(path: str):
    """Reconstruct the model; inference after a round trip is bit-identical."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not a receiver checkpoint")
    version, kind_code, tie = r.unpack("<IBB")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} "
                              f"(expected {VERSION})")
    if kind_code not in _CODE_KINDS:
        raise CheckpointError(f"unknown model kind code {kind_code}")
    kind = _CODE_KINDS[kind_code]
    k, L, tau_coh, j, d, t_stages = r.unpack("<6I")
    (n_hidden,) = r.unpack("<I")
    hidden = r.unpack(f"<{n_hidden}I")
    (n_fc,) = r.unpack("<I")
    fcnn_hidden = r.unpack(f"<{n_fc}I")
    (n_const,) = r.unpack("<I")
    const = tuple(complex(*r.unpack("<dd")) for _ in range(n_const))
    sg, syp, syd, syn = r.unpack("<4d")
    tau_thr, seed = r.unpack("<dq")

    scheme = NONCOHERENT if kind == NONCOHERENT_PIC else COHERENT
    cfg = SystemConfig(n_devices=k, seq_len=L, coherence_len=tau_coh, n_bits=j,
                       n_symbols=d, constellation=const or BPSK, scheme=scheme,
                       n_stages=t_stages, hidden_sizes=tuple(hidden),
                       fcnn_hidden_sizes=tuple(fcnn_hidden))
    std = Standardizer(sigma_gamma=sg,
                       sigma_y_pilot=syp or None,
                       sigma_y_data=syd or None,
                       sigma_y_nc=syn or None)

    groups = _expected_groups(kind, cfg, bool(tie))
    expected_shapes: list[tuple[int, ...]] = []
    for spec, n_mod in groups:
        expected_shapes.extend(_group_shapes(spec, n_mod))

    (n_tensors,) = r.unpack("<I")
    if n_tensors != len(expected_shapes):
        raise CheckpointError(
            f"shape table mismatch: {n_tensors} tensors stored, "
            f"{len(expected_shapes)} expected for kind={kind}, K={k}, T={t_stages}")
    stored_shapes = []
    for _ in range(n_tensors):
        (ndim,) = r.unpack("<B")
        stored_shapes.append(tuple(r.unpack(f"<{ndim}I")))
    for i, (got, want) in enumerate(zip(stored_shapes, expected_shapes)):
        if got != want:
            raise CheckpointError(
                f"tensor {i} shape mismatch: stored {got}, expected {want} "
                f"(checkpoint was built for a different scenario)")

    tensors: list[np.ndarray] = []
    for shape in stored_shapes:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.take(4 * count)
        tensors.append(np.frombuffer(raw, dtype="<f4").astype(np.float64)
                       .reshape(shape))
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")

    def build_group(spec: MlpSpec) -> MlpParams:
        weights, biases = [], []
        for _ in range(spec.n_layers):
            weights.append(tensors.pop(0))
            biases.append(tensors.pop(0))
        return MlpParams(spec=spec, weights=weights, biases=biases)

    codebook = generate_codebook(cfg, seed)
    if kind == FCNN:
        ce = build_group(groups[0][0])
        ad = build_group(groups[1][0])
        return FcnnModel(config=cfg, codebook=codebook, standardizer=std,
                         ce=ce, ad=ad, tau_thr=tau_thr, seed=seed)
    ce = [build_group(groups[t][0]) for t in range(t_stages)]
    dd = None
    ad = None
    if kind == PILOT_ONLY:
        ad = build_group(groups[t_stages][0])
    else:
        dd = [build_group(groups[t_stages + t][0]) for t in range(t_stages)]
    return PicModel(kind=kind, config=cfg, codebook=codebook, standardizer=std,
                    ce=ce, dd=dd, ad=ad, tau_thr=tau_thr, seed=seed,
                    tie_devices=bool(tie))


def with_threshold(model, tau_thr: float):
    """Copy of a loaded model with a recalibrated decision threshold."""
    return replace(model, tau_thr=tau_thr)
