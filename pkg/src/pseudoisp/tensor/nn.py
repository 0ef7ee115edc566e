"""Convolution stacks with Kaiming-uniform initialisation."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor, conv2d, relu, softplus

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "softplus": softplus,
}


def kaiming_uniform(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvStack:
    """A chain of same-padded convolutions with ReLU between layers.

    ``channels`` lists the feature widths, e.g. ``[3, 128, ..., 3]`` gives
    ``len(channels) - 1`` layers.  ``final`` names the activation applied
    after the last layer (``None`` keeps it linear).
    """

    def __init__(
        self,
        channels: list[int],
        kernel: int,
        rng: np.random.Generator,
        groups: int = 1,
        final: str | None = None,
        dtype=np.float32,
        name: str = "conv",
    ):
        if len(channels) < 2:
            raise ValueError("need at least input and output channel counts")
        if final is not None and final not in ACTIVATIONS:
            raise ValueError(f"unknown activation {final!r}")
        self.channels = list(channels)
        self.kernel = kernel
        self.groups = groups
        self.final = final
        self.name = name
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
            if cin % groups or cout % groups:
                raise ValueError(f"layer {i}: groups={groups} must divide {cin} and {cout}")
            w = kaiming_uniform((cout, cin // groups, kernel, kernel), rng, dtype)
            self.weights.append(Tensor(w, requires_grad=True, name=f"{name}.{i}.weight"))
            self.biases.append(Tensor(np.zeros(cout, dtype=dtype), requires_grad=True, name=f"{name}.{i}.bias"))

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = conv2d(x, w, b, groups=self.groups)
            if i < last:
                x = relu(x)
            elif self.final is not None:
                x = ACTIVATIONS[self.final](x)
        return x

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing array {p.name!r}")
            arr = arrays[p.name]
            if arr.shape != p.shape:
                raise ValueError(f"{p.name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def init_passthrough(self, readout: np.ndarray) -> None:
        """Re-initialise so the stack starts as the per-pixel map x -> readout @ x.

        Input channel i rides through the hidden layers as relu(x_i) and
        relu(-x_i) on hidden channels i and C+i (centre-tap Dirac kernels).
        The other hidden channels keep their random weights; the last layer
        starts disconnected from them, so they join in once training moves it.
        """
        cin = self.channels[0]
        readout = np.asarray(readout, dtype=np.float64)
        if self.groups != 1:
            raise ValueError("passthrough init needs groups=1")
        if readout.shape != (self.channels[-1], cin):
            raise ValueError(f"readout must be {(self.channels[-1], cin)}, got {readout.shape}")
        if min(self.channels[1:-1], default=0) < 2 * cin:
            raise ValueError(f"hidden width must be >= {2 * cin} for passthrough init")
        c = self.kernel // 2
        idx = np.arange(cin)
        last = len(self.weights) - 1
        for i, w in enumerate(self.weights):
            wd = w.data
            if i == last:
                wd[...] = 0
                wd[:, idx, c, c] = readout
                wd[:, cin + idx, c, c] = -readout
            else:
                wd[: 2 * cin] = 0
                if i == 0:
                    wd[idx, idx, c, c] = 1
                    wd[cin + idx, idx, c, c] = -1
                else:
                    wd[np.arange(2 * cin), np.arange(2 * cin), c, c] = 1
            self.biases[i].data[...] = 0

    def zero_last_layer(self) -> None:
        self.weights[-1].data[...] = 0
        self.biases[-1].data[...] = 0
