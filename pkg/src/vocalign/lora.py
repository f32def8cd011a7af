"""Low-rank adapters on frozen attention projections."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .numerics import ContractError, ShapeError, Tensor, parameter

ENCODERS = ("visual", "text")
PROJECTIONS = ("q", "k", "v", "o")
MAX_BLOCK = 4

# (encoder, block index, projection)
Site = tuple[str, int, str]


def site_key(site: Site) -> str:
    encoder, block, proj = site
    return f"{encoder}.blocks.{block}.attn.{proj}"


def parse_site(key: str) -> Site:
    encoder, _, block, _, proj = key.split(".")
    return encoder, int(block), proj


def default_sites(n_blocks: int = MAX_BLOCK) -> list[Site]:
    return [(enc, b, p) for enc in ENCODERS for b in range(min(n_blocks, MAX_BLOCK)) for p in PROJECTIONS]


def validate_site(site: Site) -> None:
    encoder, block, proj = site
    if encoder not in ENCODERS or proj not in PROJECTIONS or not 0 <= block < MAX_BLOCK:
        raise ContractError(f"LoRA site {site} outside the first {MAX_BLOCK} attention blocks")


@dataclass
class LoraAdapter:
    """Trainable pair ``(A, B)`` whose product ``B @ A`` is added to a frozen weight."""

    A: Tensor  # [rank, d_in]
    B: Tensor  # [d_out, rank]
    scaling: float = 1.0

    def __post_init__(self):
        rank, d_in = self.A.shape
        d_out, rank_b = self.B.shape
        if rank_b != rank:
            raise ShapeError(f"factor ranks differ: A {self.A.shape}, B {self.B.shape}")
        if not 1 <= rank <= min(d_in, d_out):
            raise ShapeError(f"rank {rank} must lie in [1, min({d_in}, {d_out})]")
        if self.scaling <= 0:
            raise ValueError("scaling must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @classmethod
    def init(cls, d_out: int, d_in: int, rank: int, rng: np.random.Generator,
             scaling: float = 1.0) -> "LoraAdapter":
        A = parameter(rng.normal(0.0, 0.02 / rank, size=(rank, d_in)))
        B = parameter(np.zeros((d_out, rank)))
        return cls(A, B, scaling)

    def delta(self) -> Tensor:
        return (self.B @ self.A) * self.scaling


def effective_weight(W: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """``W + scaling * B @ A``; ``W`` is never modified."""
    if adapter is None:
        return W
    if W.shape != (adapter.d_out, adapter.d_in):
        raise ShapeError(f"adapter ({adapter.d_out}x{adapter.d_in}) does not fit weight {W.shape}")
    return W + adapter.delta()


class LoraSet:
    """Adapters keyed by projection site, iterated in a fixed site order."""

    def __init__(self, adapters: dict[Site, LoraAdapter] | None = None):
        self._adapters: dict[Site, LoraAdapter] = {}
        for site, ad in (adapters or {}).items():
            self[site] = ad

    @classmethod
    def create(cls, d_model: int, rank: int, rng: np.random.Generator,
               sites: Iterable[Site] | None = None, scaling: float = 1.0) -> "LoraSet":
        sites = default_sites() if sites is None else list(sites)
        return cls({s: LoraAdapter.init(d_model, d_model, rank, rng, scaling) for s in sorted(sites, key=_order)})

    def __setitem__(self, site: Site, adapter: LoraAdapter) -> None:
        validate_site(site)
        self._adapters[site] = adapter
        self._adapters = dict(sorted(self._adapters.items(), key=lambda kv: _order(kv[0])))

    def __getitem__(self, site: Site) -> LoraAdapter:
        return self._adapters[site]

    def get(self, site: Site) -> LoraAdapter | None:
        return self._adapters.get(site)

    def __contains__(self, site) -> bool:
        return site in self._adapters

    def __len__(self) -> int:
        return len(self._adapters)

    def __iter__(self) -> Iterator[Site]:
        return iter(self._adapters)

    def items(self):
        return self._adapters.items()

    def sites(self) -> list[Site]:
        return list(self._adapters)

    def clone(self, trainable: bool = True) -> "LoraSet":
        """Deep copy; ``trainable=False`` produces a gradient-free copy (teacher)."""
        out = LoraSet()
        for site, ad in self._adapters.items():
            A = Tensor(ad.A.data.copy(), requires_grad=trainable)
            B = Tensor(ad.B.data.copy(), requires_grad=trainable)
            out._adapters[site] = LoraAdapter(A, B, ad.scaling)
        return out

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for site, ad in self._adapters.items():
            yield f"{site_key(site)}.lora_A", ad.A
            yield f"{site_key(site)}.lora_B", ad.B


def _order(site: Site) -> tuple[int, int, int]:
    encoder, block, proj = site
    return ENCODERS.index(encoder), block, PROJECTIONS.index(proj)


def trainable_parameters(lora_set: LoraSet | None) -> list[Tensor]:
    """The A and B factors of every site, in site order."""
    if lora_set is None:
        return []
    return [t for _, t in lora_set.named_tensors()]


def num_trainable_scalars(lora_set: LoraSet | None) -> int:
    return sum(t.size for t in trainable_parameters(lora_set))
