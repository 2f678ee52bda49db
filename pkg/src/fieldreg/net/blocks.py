"""Registration block architectures: affine encoder head and deformable
encoder-decoder, with forward evaluation and hand-written reverse mode.

Both blocks share a five-stage encoder (channels 16, 32, 32, 32, 32; the
first stage keeps resolution, the rest halve it). The deformable decoder
has six stages (channels 32, 32, 32, 8, 8, 3): four transposed-conv
upsampling stages, each concatenated with the matching encoder activation,
then two full-resolution stages, the last emitting the raw 3-channel
displacement field. The affine block replaces the decoder with global
average pooling and a linear map to 12 residual parameters, so zero-
initialized heads realize the identity transform.

A forward pass records one TapeContext; calling backward consumes it.
Live-tape accounting lets callers assert that per-organ training keeps at
most one set of retained activations alive at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, GridMismatchError
from ..fields import AffineParams, DisplacementField
from ..volume import Volume, require_block_compatible
from .convops import (
    conv3d_backward,
    conv3d_forward,
    leaky_relu_backward,
    leaky_relu_forward,
    tconv3d_backward,
    tconv3d_forward,
)

NEGATIVE_SLOPE = 0.2
ENCODER_CHANNELS = (16, 32, 32, 32, 32)
DECODER_CHANNELS = (32, 32, 32, 8, 8, 3)
AFFINE_PARAM_COUNT = 12


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | tconv | leaky_relu | concat | global_head
    in_channels: int = 0
    out_channels: int = 0
    stride: int = 1
    kernel: int = 3
    padding: int = 1
    negative_slope: float = NEGATIVE_SLOPE

    def __post_init__(self):
        if self.kind in ("conv", "tconv"):
            if self.kernel != 3 or self.padding != 1:
                raise ContractError("conv layers are fixed at kernel 3, padding 1")
            if self.stride not in (1, 2):
                raise ContractError("stride must be 1 or 2")
        if self.kind == "leaky_relu" and self.negative_slope != NEGATIVE_SLOPE:
            raise ContractError(f"negative slope is fixed at {NEGATIVE_SLOPE}")

    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "conv":
            return [(self.out_channels, self.in_channels, 3, 3, 3), (self.out_channels,)]
        if self.kind == "tconv":
            return [(self.in_channels, self.out_channels, 3, 3, 3), (self.out_channels,)]
        if self.kind == "global_head":
            return [(self.out_channels, self.in_channels), (self.out_channels,)]
        return []

    def to_json(self) -> dict:
        return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels,
                "stride": self.stride}

    @classmethod
    def from_json(cls, obj: dict) -> "LayerSpec":
        return cls(obj["kind"], obj["in"], obj["out"], obj.get("stride", 1))


def _encoder_layers(lrelu=True) -> list[LayerSpec]:
    layers = []
    prev = 2
    for i, ch in enumerate(ENCODER_CHANNELS):
        layers.append(LayerSpec("conv", prev, ch, stride=1 if i == 0 else 2))
        layers.append(LayerSpec("leaky_relu", ch, ch))
        prev = ch
    return layers


def deformable_layers() -> tuple[LayerSpec, ...]:
    layers = _encoder_layers()
    skips = [ENCODER_CHANNELS[3], ENCODER_CHANNELS[2], ENCODER_CHANNELS[1], ENCODER_CHANNELS[0]]
    prev = ENCODER_CHANNELS[-1]
    for stage, ch in enumerate(DECODER_CHANNELS):
        if stage < 4:
            layers.append(LayerSpec("tconv", prev, prev, stride=2))
            layers.append(LayerSpec("concat", prev + skips[stage], prev + skips[stage]))
            layers.append(LayerSpec("conv", prev + skips[stage], ch, stride=1))
            layers.append(LayerSpec("leaky_relu", ch, ch))
        else:
            layers.append(LayerSpec("conv", prev, ch, stride=1))
            if stage < len(DECODER_CHANNELS) - 1:
                layers.append(LayerSpec("leaky_relu", ch, ch))
        prev = ch
    return tuple(layers)


def affine_layers() -> tuple[LayerSpec, ...]:
    layers = _encoder_layers()
    layers.append(LayerSpec("global_head", ENCODER_CHANNELS[-1], AFFINE_PARAM_COUNT))
    return tuple(layers)


@dataclass
class BlockWeights:
    """All learnable tensors of one block, aligned with its layer chain."""

    arch: str  # "affine" | "deformable"
    layers: tuple[LayerSpec, ...]
    params: list[list[np.ndarray]]
    seed: int | None = None

    def __post_init__(self):
        if self.arch not in ("affine", "deformable"):
            raise ContractError(f"unknown architecture {self.arch!r}")
        if len(self.params) != len(self.layers):
            raise ContractError("params list must align with layer chain")
        for spec, tensors in zip(self.layers, self.params):
            shapes = spec.param_shapes()
            if len(tensors) != len(shapes):
                raise ContractError(f"layer {spec.kind}: expected {len(shapes)} tensors")
            for t, shape in zip(tensors, shapes):
                if t.shape != shape:
                    raise ContractError(f"layer {spec.kind}: tensor shape {t.shape} != {shape}")
                if not np.all(np.isfinite(t)):
                    raise ContractError("weights must be finite")

    @property
    def dtype(self):
        for tensors in self.params:
            for t in tensors:
                return t.dtype
        return np.dtype(np.float32)

    def flat(self) -> list[np.ndarray]:
        return [t for tensors in self.params for t in tensors]

    def astype(self, dtype) -> "BlockWeights":
        return BlockWeights(self.arch, self.layers,
                            [[t.astype(dtype) for t in tensors] for tensors in self.params],
                            self.seed)

    def copy(self) -> "BlockWeights":
        return BlockWeights(self.arch, self.layers,
                            [[t.copy() for t in tensors] for tensors in self.params],
                            self.seed)


def init_weights(arch: str, seed: int, dtype=np.float32) -> BlockWeights:
    """Fan-in-scaled uniform init; output layers start at zero so an
    untrained block is the identity transform. Deterministic per seed."""
    layers = deformable_layers() if arch == "deformable" else affine_layers()
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed & (2 ** 64 - 1))))
    params: list[list[np.ndarray]] = []
    last_param_idx = max(i for i, s in enumerate(layers) if s.param_shapes())
    for i, spec in enumerate(layers):
        shapes = spec.param_shapes()
        if not shapes:
            params.append([])
            continue
        if i == last_param_idx:
            params.append([np.zeros(s, dtype=dtype) for s in shapes])
            continue
        fan_in = spec.in_channels * spec.kernel ** 3 if spec.kind != "global_head" else spec.in_channels
        scale = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-scale, scale, size=shapes[0]).astype(dtype)
        b = np.zeros(shapes[1], dtype=dtype)
        params.append([w, b])
    return BlockWeights(arch, layers, params, seed)


class TapeContext:
    """Recorded activations of one forward pass; backward consumes them.

    ``live_count`` counts tapes still holding activations, which bounds the
    retained-memory footprint during per-organ gradient accumulation.
    """

    _live = 0
    _peak = 0

    def __init__(self, weights: BlockWeights, recording: bool):
        self.weights = weights
        self.recording = recording
        self.entries: list[tuple[int, object]] = []
        self.meta: dict = {}
        self._consumed = False
        if recording:
            TapeContext._live += 1
            TapeContext._peak = max(TapeContext._peak, TapeContext._live)

    @classmethod
    def live_count(cls) -> int:
        return cls._live

    @classmethod
    def reset_peak(cls) -> None:
        cls._peak = cls._live

    @classmethod
    def peak_live(cls) -> int:
        return cls._peak

    def push(self, layer_idx: int, saved) -> None:
        if self.recording:
            self.entries.append((layer_idx, saved))

    def consume(self) -> list[tuple[int, object]]:
        if not self.recording:
            raise ContractError("forward pass was not recorded; cannot backward")
        if self._consumed:
            raise ContractError("backward already invoked on this tape")
        self._consumed = True
        TapeContext._live -= 1
        entries, self.entries = self.entries, []
        return entries

    def release(self) -> None:
        """Drop activations without running backward."""
        if self.recording and not self._consumed:
            self._consumed = True
            TapeContext._live -= 1
            self.entries = []


def _stack_inputs(fixed: Volume, moving: Volume, dtype) -> np.ndarray:
    if fixed.grid != moving.grid:
        raise GridMismatchError("block inputs must share one grid")
    require_block_compatible(fixed.grid.dims)
    x = np.empty((2, *fixed.grid.dims), dtype=dtype)
    x[0] = fixed.samples
    x[1] = moving.samples
    return x


def _run_layers(bw: BlockWeights, x: np.ndarray, tape: TapeContext):
    """Execute the layer chain; returns the final output.

    Encoder activations feed decoder concats by fixed wiring: the skip for
    upsampling stage s is the activation of encoder stage 4 - s.
    """
    enc_acts: list[np.ndarray] = []
    skip_stack: list[np.ndarray] = []
    out = x
    for i, spec in enumerate(bw.layers):
        if spec.kind == "conv":
            w, b = bw.params[i]
            tape.push(i, out)
            out = conv3d_forward(out, w, b, spec.stride)
        elif spec.kind == "tconv":
            w, b = bw.params[i]
            tape.push(i, out)
            out = tconv3d_forward(out, w, b)
        elif spec.kind == "leaky_relu":
            out, mask = leaky_relu_forward(out, spec.negative_slope)
            tape.push(i, mask)
            if len(enc_acts) < len(ENCODER_CHANNELS):
                enc_acts.append(out)
                if len(enc_acts) == len(ENCODER_CHANNELS):
                    skip_stack = enc_acts[-2::-1]  # stages 4, 3, 2, 1
                    tape.meta["encoder_dims"] = [a.shape[1:] for a in enc_acts]
        elif spec.kind == "concat":
            skip = skip_stack.pop(0)
            tape.push(i, (out.shape[0], skip.shape[0]))
            out = np.concatenate([out, skip], axis=0)
        elif spec.kind == "global_head":
            w, b = bw.params[i]
            pooled = out.mean(axis=(1, 2, 3))
            tape.push(i, (pooled, out.shape[1:]))
            out = w @ pooled + b
        else:
            raise ContractError(f"unknown layer kind {spec.kind!r}")
    return out


def _backward_layers(bw: BlockWeights, entries, upstream: np.ndarray):
    """Reverse the chain; returns per-tensor gradients aligned with flat()."""
    grads: dict[int, list[np.ndarray]] = {}
    # Skip-connection gradients accumulate onto encoder activations, which
    # are revisited later in the reversed walk (at their leaky_relu entry).
    n_enc = len(ENCODER_CHANNELS)
    enc_act_entries = [i for i, (li, _) in enumerate(entries)
                       if bw.layers[li].kind == "leaky_relu"][:n_enc]
    pending_skip: dict[int, np.ndarray] = {}
    skip_targets = enc_act_entries[-2::-1]  # entry indices of stages 4, 3, 2, 1
    concat_seen = 0

    g = upstream
    for pos in range(len(entries) - 1, -1, -1):
        li, saved = entries[pos]
        spec = bw.layers[li]
        if pos in pending_skip:
            g = g + pending_skip.pop(pos)
        if spec.kind == "conv":
            x = saved
            w, _ = bw.params[li]
            gx, gw, gb = conv3d_backward(x, w, spec.stride, g)
            grads[li] = [gw, gb]
            g = gx
        elif spec.kind == "tconv":
            x = saved
            w, _ = bw.params[li]
            gx, gw, gb = tconv3d_backward(x, w, g)
            grads[li] = [gw, gb]
            g = gx
        elif spec.kind == "leaky_relu":
            g = leaky_relu_backward(saved, spec.negative_slope, g)
        elif spec.kind == "concat":
            main_ch, _ = saved
            g_skip = g[main_ch:]
            # Concats run in decoder order; reversed walk sees them last
            # first, so index skips from the back.
            target = skip_targets[len(skip_targets) - 1 - concat_seen]
            concat_seen += 1
            prev = pending_skip.get(target)
            pending_skip[target] = g_skip if prev is None else prev + g_skip
            g = np.ascontiguousarray(g[:main_ch])
        elif spec.kind == "global_head":
            pooled, feat_dims = saved
            w, _ = bw.params[li]
            grads[li] = [np.outer(g, pooled), g.copy()]
            n = int(np.prod(feat_dims))
            g = np.broadcast_to((w.T @ g / n)[:, None, None, None],
                                (w.shape[1], *feat_dims)).astype(pooled.dtype)
        else:
            raise ContractError(f"unknown layer kind {spec.kind!r}")

    flat: list[np.ndarray] = []
    for i, spec in enumerate(bw.layers):
        if spec.param_shapes():
            flat.extend(grads[i])
    return flat


def deformable_forward(bw: BlockWeights, fixed: Volume, moving: Volume,
                       record: bool = True) -> tuple[DisplacementField, TapeContext]:
    """Predict a displacement field (voxel units) for one image pair."""
    if bw.arch != "deformable":
        raise ContractError("weights are not a deformable block")
    x = _stack_inputs(fixed, moving, bw.dtype)
    tape = TapeContext(bw, record)
    out = _run_layers(bw, x, tape)
    tape.meta["output_dims"] = out.shape[1:]
    return DisplacementField(fixed.grid, out), tape


def affine_forward(bw: BlockWeights, fixed: Volume, moving: Volume,
                   record: bool = True) -> tuple[AffineParams, TapeContext]:
    """Predict residual affine parameters: A = I + dA, t = dt."""
    if bw.arch != "affine":
        raise ContractError("weights are not an affine block")
    x = _stack_inputs(fixed, moving, bw.dtype)
    tape = TapeContext(bw, record)
    p12 = _run_layers(bw, x, tape)
    tape.meta["param_count"] = p12.shape[0]
    da = p12[:9].reshape(3, 3).astype(np.float64)
    dt = p12[9:].astype(np.float64)
    return AffineParams(np.eye(3) + da, dt), tape


def backward(tape: TapeContext, upstream: np.ndarray) -> list[np.ndarray]:
    """Reverse-mode gradients for all block tensors given the upstream
    gradient with respect to the block output (field components, or the 12
    affine parameters). Consumes the tape."""
    bw = tape.weights
    if bw.arch == "deformable":
        expected = (3, *tape.meta["output_dims"])
        if upstream.shape != expected:
            raise ContractError(f"upstream shape {upstream.shape} != {expected}")
    else:
        if upstream.shape != (AFFINE_PARAM_COUNT,):
            raise ContractError("affine upstream must have 12 entries")
    entries = tape.consume()
    return _backward_layers(bw, entries, upstream.astype(bw.dtype, copy=False))


def encoder_stage_dims(dims: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Spatial dims of each encoder stage; stage i halves i - 1 times."""
    out = [tuple(dims)]
    for _ in range(len(ENCODER_CHANNELS) - 1):
        out.append(tuple(d // 2 for d in out[-1]))
    return out
