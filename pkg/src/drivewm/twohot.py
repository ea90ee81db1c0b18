"""Twohot scalar coding over a fixed bucket grid.

A scalar is represented by weights on the two buckets that straddle it:
the left bucket gets |b_right - x| / |b_right - b_left| and the right
bucket the complement, so decoding (the weighted bucket sum) recovers x
exactly. Values outside the grid are clipped to its ends.

With ``transform="symlog"`` the grid lives in sign(x)*ln(1+|x|) space:
resolution concentrates near zero while the representable range grows to
about sign(b)*(e^|b|-1), which suits reward/value heads whose everyday
values are small but whose extremes are large.
"""

import torch


def symlog(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.log1p(torch.abs(x))


def symexp(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.expm1(torch.abs(x))


class TwohotCodec:
    def __init__(self, low: float = -20.0, high: float = 20.0, count: int = 255,
                 transform: str = "identity"):
        if count < 2 or not high > low:
            raise ValueError("need at least two strictly increasing buckets")
        if transform not in ("identity", "symlog"):
            raise ValueError(f"unknown transform '{transform}'")
        self.low, self.high, self.count = float(low), float(high), int(count)
        self.transform = transform
        self.buckets = torch.linspace(self.low, self.high, self.count, dtype=torch.float64)

    def _buckets_like(self, x: torch.Tensor) -> torch.Tensor:
        return self.buckets.to(device=x.device, dtype=x.dtype)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Weights over buckets, shape (*x.shape, count); rows sum to 1."""
        if self.transform == "symlog":
            x = symlog(x)
        b = self._buckets_like(x)
        xc = x.clamp(self.low, self.high)
        k = torch.searchsorted(b, xc.detach(), right=True) - 1
        k = k.clamp(0, self.count - 2)
        left = b[k]
        right = b[k + 1]
        w_right = (xc - left) / (right - left)
        w_left = (right - xc) / (right - left)
        out = torch.zeros(*x.shape, self.count, device=x.device, dtype=x.dtype)
        out.scatter_(-1, k.unsqueeze(-1), w_left.unsqueeze(-1))
        out.scatter_(-1, (k + 1).unsqueeze(-1), w_right.unsqueeze(-1))
        return out

    def decode(self, weights: torch.Tensor) -> torch.Tensor:
        """Weighted bucket sum; inverse of encode on the grid interior."""
        value = weights @ self._buckets_like(weights)
        if self.transform == "symlog":
            value = symexp(value)
        return value

    def expected_value(self, logits: torch.Tensor) -> torch.Tensor:
        """Mean of the categorical distribution the logits define."""
        return self.decode(torch.softmax(logits, dim=-1))
