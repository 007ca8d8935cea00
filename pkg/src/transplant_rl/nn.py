"""Small numpy network core: conv / dense / noisy-dense layers with hand-written
reverse-mode gradients, a trunk-plus-streams network container and Adam.

Arrays are float64, batch-first, channels-last (N, H, W, C).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an input does not fit the layer it is fed to."""


class StaleCacheError(RuntimeError):
    """Raised when backward() is given a cache from another network or an older parameter version."""


def noise_transform(x):
    """f(x) = sign(x) * sqrt(|x|), the factorized-noise squashing function."""
    x = np.asarray(x, dtype=DTYPE)
    return np.sign(x) * np.sqrt(np.abs(x))


class Layer:
    kind = "layer"
    param_names: tuple[str, ...] = ()

    def __init__(self, name: str, stream: str = "trunk", activation: str | None = None):
        if activation not in (None, "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.name = name
        self.stream = stream
        self.activation = activation
        self.params: dict[str, np.ndarray] = {}
        self.input_shape: tuple[int, ...] = ()
        self.output_shape: tuple[int, ...] = ()

    @property
    def key(self) -> str:
        return f"{self.name}/{self.stream}"

    def build(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name, "stream": self.stream, "activation": self.activation}

    def _check_input(self, x: np.ndarray) -> None:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"layer {self.key} ({self.kind}) expects input (N, {', '.join(map(str, self.input_shape))}), "
                f"got {tuple(x.shape)}"
            )

    def _activate(self, y):
        if self.activation == "relu":
            mask = y > 0
            return y * mask, mask
        return y, None

    @staticmethod
    def _activation_grad(gy, mask):
        return gy if mask is None else gy * mask

    def forward(self, x, noise=None):
        raise NotImplementedError

    def backward(self, cache, gy, need_input_grad=True):
        """Return ``(input_grad or None, {param: grad})``."""
        raise NotImplementedError


class Conv2D(Layer):
    """2-D convolution with "same"-style padding of (kernel - 1) // 2."""

    kind = "conv2d"
    param_names = ("weight", "bias")

    def __init__(self, name, out_channels: int, kernel: int, stride: int = 1, stream="trunk", activation="relu"):
        super().__init__(name, stream, activation)
        if min(out_channels, kernel, stride) < 1:
            raise ValueError("out_channels, kernel and stride must all be >= 1")
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = (kernel - 1) // 2

    def build(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"layer {self.key} (conv2d) needs an (H, W, C) input, got {input_shape}")
        h, w, c = input_shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {self.key}: kernel {k} does not fit input {input_shape}")
        self.input_shape = tuple(input_shape)
        self.output_shape = (ho, wo, self.out_channels)
        self.fan_in = c * k * k
        self.params = {
            "weight": np.zeros((self.out_channels, c, k, k), DTYPE),
            "bias": np.zeros(self.out_channels, DTYPE),
        }
        return self.output_shape

    def init_params(self, rng):
        bound = 1.0 / np.sqrt(self.fan_in)
        for name in self.param_names:
            p = self.params[name]
            p[...] = rng.uniform(-bound, bound, size=p.shape)

    def describe(self):
        return {**super().describe(), "out_channels": self.out_channels, "kernel": self.kernel, "stride": self.stride}

    def forward(self, x, noise=None):
        self._check_input(x)
        n = x.shape[0]
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo, o = self.output_shape
        if p:
            xp = np.zeros((n, x.shape[1] + 2 * p, x.shape[2] + 2 * p, x.shape[3]), DTYPE)
            xp[:, p:-p, p:-p] = x
        else:
            xp = x
        c = x.shape[3]
        # columns ordered (kernel row, kernel col, channel): k*k contiguous slice copies
        cols = np.empty((n, ho, wo, k, k, c), DTYPE)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j] = xp[:, i : i + s * ho : s, j : j + s * wo : s]
        cols = cols.reshape(n * ho * wo, -1)
        y = (cols @ self._wmat().T + self.params["bias"]).reshape(n, ho, wo, o)
        y, mask = self._activate(y)
        return y, (cols, xp.shape, mask)

    def _wmat(self):
        return self.params["weight"].transpose(0, 2, 3, 1).reshape(self.out_channels, -1)

    def backward(self, cache, gy, need_input_grad=True):
        cols, xp_shape, mask = cache
        gy = self._activation_grad(gy, mask)
        n = gy.shape[0]
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo, o = self.output_shape
        c = self.input_shape[2]
        g2 = gy.reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        grads = {"weight": np.ascontiguousarray(gw), "bias": g2.sum(axis=0)}
        if not need_input_grad:
            return None, grads
        gcols = (g2 @ self._wmat()).reshape(n, ho, wo, k, k, c)
        gxp = np.zeros(xp_shape, DTYPE)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += gcols[:, :, :, i, j]
        gx = gxp[:, p : xp_shape[1] - p, p : xp_shape[2] - p, :] if p else gxp
        return gx, grads


class Dense(Layer):
    """Fully connected layer; inputs with more than one feature axis are flattened."""

    kind = "dense"
    param_names = ("weight", "bias")

    def __init__(self, name, out_units: int, stream="trunk", activation=None):
        super().__init__(name, stream, activation)
        if out_units < 1:
            raise ValueError("out_units must be >= 1")
        self.out_units = out_units

    def build(self, input_shape):
        self.input_shape = tuple(input_shape)
        self.fan_in = int(np.prod(input_shape))
        self.output_shape = (self.out_units,)
        self.params = {
            "weight": np.zeros((self.fan_in, self.out_units), DTYPE),
            "bias": np.zeros(self.out_units, DTYPE),
        }
        return self.output_shape

    def init_params(self, rng):
        bound = 1.0 / np.sqrt(self.fan_in)
        for name in self.param_names:
            p = self.params[name]
            p[...] = rng.uniform(-bound, bound, size=p.shape)

    def describe(self):
        return {**super().describe(), "out_units": self.out_units}

    def _weights(self, noise):
        return self.params["weight"], self.params["bias"]

    def forward(self, x, noise=None):
        self._check_input(x)
        xf = x.reshape(x.shape[0], -1)
        w, b = self._weights(noise)
        y, mask = self._activate(xf @ w + b)
        return y, (xf, x.shape, mask, noise, w)

    def backward(self, cache, gy, need_input_grad=True):
        xf, x_shape, mask, _, w = cache
        gy = self._activation_grad(gy, mask)
        grads = {"weight": xf.T @ gy, "bias": gy.sum(axis=0)}
        return ((gy @ w.T).reshape(x_shape) if need_input_grad else None), grads


class NoisyDense(Dense):
    """Dense layer with factorized Gaussian weight noise.

    Effective weights are ``mu_w + sigma_w * outer(f(eps_in), f(eps_out))`` and
    ``mu_b + sigma_b * f(eps_out)``. With no noise draw the layer is the plain
    dense layer ``(mu_w, mu_b)``.
    """

    kind = "noisy_dense"
    param_names = ("mu_w", "mu_b", "sigma_w", "sigma_b")

    def __init__(self, name, out_units: int, sigma0: float = 0.5, stream="trunk", activation=None):
        super().__init__(name, out_units, stream, activation)
        self.sigma0 = sigma0

    def build(self, input_shape):
        super().build(input_shape)
        shape_w, shape_b = (self.fan_in, self.out_units), (self.out_units,)
        self.params = {
            "mu_w": np.zeros(shape_w, DTYPE),
            "mu_b": np.zeros(shape_b, DTYPE),
            "sigma_w": np.zeros(shape_w, DTYPE),
            "sigma_b": np.zeros(shape_b, DTYPE),
        }
        return self.output_shape

    def init_params(self, rng):
        bound = 1.0 / np.sqrt(self.fan_in)
        self.params["mu_w"][...] = rng.uniform(-bound, bound, size=self.params["mu_w"].shape)
        self.params["mu_b"][...] = rng.uniform(-bound, bound, size=self.params["mu_b"].shape)
        self.params["sigma_w"][...] = self.sigma0 / np.sqrt(self.fan_in)
        self.params["sigma_b"][...] = self.sigma0 / np.sqrt(self.fan_in)

    def describe(self):
        return {**super().describe(), "sigma0": self.sigma0}

    def effective_weights(self, noise):
        """``(W, b)`` actually applied under ``noise``; forward never materializes W."""
        p = self.params
        if noise is None:
            return p["mu_w"], p["mu_b"]
        f_in, f_out = noise
        return p["mu_w"] + p["sigma_w"] * np.outer(f_in, f_out), p["mu_b"] + p["sigma_b"] * f_out

    def forward(self, x, noise=None):
        self._check_input(x)
        p = self.params
        xf = x.reshape(x.shape[0], -1)
        y = xf @ p["mu_w"] + p["mu_b"]
        if noise is not None:
            f_in, f_out = noise
            y += ((xf * f_in) @ p["sigma_w"] + p["sigma_b"]) * f_out
        y, mask = self._activate(y)
        return y, (xf, x.shape, mask, noise)

    def backward(self, cache, gy, need_input_grad=True):
        xf, x_shape, mask, noise = cache
        p = self.params
        gy = self._activation_grad(gy, mask)
        grads = {"mu_w": xf.T @ gy, "mu_b": gy.sum(axis=0)}
        gx = gy @ p["mu_w"].T if need_input_grad else None
        if noise is None:
            grads["sigma_w"] = np.zeros_like(p["sigma_w"])
            grads["sigma_b"] = np.zeros_like(p["sigma_b"])
        else:
            f_in, f_out = noise
            gyo = gy * f_out
            grads["sigma_w"] = (xf * f_in).T @ gyo
            grads["sigma_b"] = gyo.sum(axis=0)
            if need_input_grad:
                gx += (gyo @ p["sigma_w"].T) * f_in
        return (gx.reshape(x_shape) if need_input_grad else None), grads


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, Dense, NoisyDense)}


def layer_from_description(d: dict) -> Layer:
    d = dict(d)
    cls = LAYER_KINDS[d.pop("kind")]
    return cls(**d)


@dataclass
class ForwardCache:
    network_id: int
    version: int
    trunk: list
    streams: dict = field(default_factory=dict)
    trunk_output_shape: tuple = ()


class Network:
    """A trunk of layers followed by optional parallel streams.

    With streams, the output is the concatenation of every stream's output along
    the last axis, in stream order. Parameters are addressed as
    ``"{layer name}/{stream}/{param}"``; layer names double as depth positions.
    """

    def __init__(self, input_shape, trunk: list[Layer], streams: dict[str, list[Layer]] | None = None):
        self.input_shape = tuple(input_shape)
        self.trunk = list(trunk)
        self.streams = dict(streams or {})
        self.version = 0
        shape = self.input_shape
        for layer in self.trunk:
            shape = layer.build(shape)
        self.trunk_output_shape = shape
        widths = []
        for stream, layers in self.streams.items():
            s = shape
            for layer in layers:
                if layer.stream != stream:
                    raise ValueError(f"layer {layer.name} is tagged stream {layer.stream!r} but sits in {stream!r}")
                s = layer.build(s)
            if len(s) != 1:
                raise ShapeError(f"stream {stream!r} must end in a flat output, got {s}")
            widths.append(s[0])
        self.stream_widths = widths
        self.output_shape = (sum(widths),) if self.streams else shape
        self.architecture_hash = architecture_hash(self.describe())

    @property
    def layers(self) -> list[Layer]:
        out = list(self.trunk)
        for layers in self.streams.values():
            out.extend(layers)
        return out

    @property
    def layer_names(self) -> list[str]:
        """Distinct depth-position names in order of first appearance."""
        seen: list[str] = []
        for layer in self.trunk:
            if layer.name not in seen:
                seen.append(layer.name)
        depth = max((len(v) for v in self.streams.values()), default=0)
        for i in range(depth):
            for layers in self.streams.values():
                if i < len(layers) and layers[i].name not in seen:
                    seen.append(layers[i].name)
        return seen

    @property
    def depth(self) -> int:
        return len(self.layer_names)

    def describe(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "trunk": [layer.describe() for layer in self.trunk],
            # a list, not a mapping: stream order fixes the output layout and must survive key sorting
            "streams": [[k, [layer.describe() for layer in v]] for k, v in self.streams.items()],
        }

    @classmethod
    def from_description(cls, d: dict) -> "Network":
        return cls(
            d["input_shape"],
            [layer_from_description(x) for x in d["trunk"]],
            {k: [layer_from_description(x) for x in v] for k, v in d.get("streams", [])},
        )

    def init_params(self, rng_or_seed) -> "Network":
        rng = np.random.default_rng(rng_or_seed) if not isinstance(rng_or_seed, np.random.Generator) else rng_or_seed
        for layer in self.layers:
            layer.init_params(rng)
        self.version += 1
        return self

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{layer.key}/{p}": arr for layer in self.layers for p, arr in layer.params.items()}

    def parameters_of(self, layer_name: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.parameters().items() if k.split("/", 1)[0] == layer_name}

    def set_parameters(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict and set(values) != set(params):
            missing, extra = set(params) - set(values), set(values) - set(params)
            raise KeyError(f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in values.items():
            if name not in params:
                raise KeyError(f"unknown parameter {name}")
            if params[name].shape != np.shape(value):
                raise ShapeError(f"parameter {name}: shape {np.shape(value)} != {params[name].shape}")
            params[name][...] = value
        self.version += 1

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def noisy_layers(self) -> list[NoisyDense]:
        return [layer for layer in self.layers if isinstance(layer, NoisyDense)]

    def forward(self, x, noise: dict | None = None):
        """Run the network. Returns ``(output, cache)``; ``noise=None`` is the deterministic mode."""
        x = np.asarray(x, dtype=DTYPE)
        if x.ndim == len(self.input_shape):
            raise ShapeError(f"input must carry a batch axis: expected (N, {self.input_shape}), got {x.shape}")
        noise = noise or {}
        cache = ForwardCache(id(self), self.version, [])
        h = x
        for layer in self.trunk:
            h, c = layer.forward(h, noise.get(layer.key))
            cache.trunk.append(c)
        if not self.streams:
            return h, cache
        cache.trunk_output_shape = h.shape
        outs = []
        for stream, layers in self.streams.items():
            s = h
            caches = []
            for layer in layers:
                s, c = layer.forward(s, noise.get(layer.key))
                caches.append(c)
            cache.streams[stream] = caches
            outs.append(s)
        return np.concatenate(outs, axis=-1), cache

    def backward(self, cache: ForwardCache, output_grad, return_input_grad: bool = False, frozen=None):
        """Exact gradients of the scalar loss whose output gradient is ``output_grad``.

        Returns the parameter gradients, plus the input gradient when
        ``return_input_grad`` is set. Layers named in ``frozen`` get no entry,
        and backpropagation stops once nothing below needs a gradient.
        """
        if cache.network_id != id(self) or cache.version != self.version:
            raise StaleCacheError("cache was produced by a different network or before a parameter update")
        frozen = frozenset(frozen or ())
        trainable = [layer.name not in frozen for layer in self.trunk]
        # needs_below[i]: does anything under trunk layer i want a gradient
        needs_below = [return_input_grad or any(trainable[:i]) for i in range(len(self.trunk))]
        trunk_needs = return_input_grad or any(trainable)
        gy = np.asarray(output_grad, dtype=DTYPE)
        grads: dict[str, np.ndarray] = {}
        if self.streams:
            if gy.shape[-1] != self.output_shape[0]:
                raise ShapeError(f"output_grad last axis {gy.shape[-1]} != network output {self.output_shape[0]}")
            g_trunk = np.zeros(cache.trunk_output_shape, DTYPE) if trunk_needs else None
            offset = 0
            for (stream, layers), width in zip(self.streams.items(), self.stream_widths):
                g = gy[..., offset : offset + width]
                offset += width
                for j in reversed(range(len(layers))):
                    layer = layers[j]
                    below = trunk_needs or any(l.name not in frozen for l in layers[:j])
                    if layer.name in frozen and not below:
                        g = None
                        break
                    g, lg = layer.backward(cache.streams[stream][j], g, need_input_grad=below)
                    if layer.name not in frozen:
                        grads.update({f"{layer.key}/{k}": v for k, v in lg.items()})
                if g is not None:
                    g_trunk += g
            gy = g_trunk
        if trunk_needs:
            for i in reversed(range(len(self.trunk))):
                layer = self.trunk[i]
                if not trainable[i] and not needs_below[i]:
                    break
                gy, lg = layer.backward(cache.trunk[i], gy, need_input_grad=needs_below[i])
                if trainable[i]:
                    grads.update({f"{layer.key}/{k}": v for k, v in lg.items()})
        if return_input_grad:
            return grads, gy
        return grads


def architecture_hash(description: dict) -> str:
    blob = json.dumps(description, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sample_noise(net: Network, rng: np.random.Generator) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Draw factorized noise for every noisy layer, already passed through f."""
    draw = {}
    for layer in net.noisy_layers():
        eps_in = rng.standard_normal(layer.fan_in)
        eps_out = rng.standard_normal(layer.out_units)
        draw[layer.key] = (noise_transform(eps_in), noise_transform(eps_out))
    return draw


@dataclass
class Adam:
    """Adaptive-moment optimizer state; moments are keyed by parameter name."""

    lr: float = 1e-3
    eps: float = 1.5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


OptimizerState = Adam


def resolve_freeze_mask(net: Network, freeze_mask: Iterable[str] | None) -> set[str]:
    if not freeze_mask:
        return set()
    mask = set(freeze_mask)
    unknown = mask - set(net.layer_names)
    if unknown:
        raise KeyError(f"freeze mask names unknown layers: {sorted(unknown)}")
    return mask


def apply_gradients(net: Network, grads: dict, opt: Adam, freeze_mask: Iterable[str] | None = None) -> None:
    """One Adam step in place. Parameters (and their moments) under frozen layers are left untouched."""
    frozen = resolve_freeze_mask(net, freeze_mask)
    params = net.parameters()
    unknown = set(grads) - set(params)
    missing = {n for n in set(params) - set(grads) if n.split("/", 1)[0] not in frozen}
    if unknown or missing:
        raise KeyError(f"gradient set does not match network parameters (unknown {sorted(unknown)}, "
                       f"missing {sorted(missing)})")
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, p in params.items():
        if name.split("/", 1)[0] in frozen:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        tmp = np.multiply(g, 1.0 - b1)
        m *= b1
        m += tmp
        np.square(g, out=tmp)
        tmp *= 1.0 - b2
        v *= b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += opt.eps
        np.divide(m, tmp, out=tmp)
        tmp *= opt.lr / c1
        p -= tmp
    net.version += 1


def rainbow_network(
    n_actions: int,
    n_atoms: int,
    input_shape=(10, 10, 4),
    hidden: int = 128,
    sigma0: float = 0.5,
) -> Network:
    """Default five-depth dueling network: three convs, then noisy hidden and output layers per stream."""
    trunk = [
        Conv2D("layer1", 8, 3, 1),
        Conv2D("layer2", 16, 3, 2),
        Conv2D("layer3", 16, 3, 1),
    ]
    streams = {
        "value": [
            NoisyDense("layer4", hidden, sigma0, stream="value", activation="relu"),
            NoisyDense("layer5", n_atoms, sigma0, stream="value"),
        ],
        "advantage": [
            NoisyDense("layer4", hidden, sigma0, stream="advantage", activation="relu"),
            NoisyDense("layer5", n_actions * n_atoms, sigma0, stream="advantage"),
        ],
    }
    return Network(input_shape, trunk, streams)
