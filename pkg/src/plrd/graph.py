"""Architecture metadata for the micro-transformer.

A :class:`ModelGraph` fixes the dimensions and records, for every FC slot,
whether it is dense or factored and at which rank.  Weights are stored as
``d_in x d_out`` (``y = x @ W``).
"""

import enum
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from .errors import ValidationError


class ModuleKind(str, enum.Enum):
    ATTENTION_Q = "attention_q"
    ATTENTION_K = "attention_k"
    ATTENTION_V = "attention_v"
    ATTENTION_O = "attention_o"
    MLP_UP = "mlp_up"
    MLP_GATE = "mlp_gate"
    MLP_DOWN = "mlp_down"
    OTHER = "other"

    @property
    def is_attention(self):
        return self.value.startswith("attention_")

    @property
    def is_mlp(self):
        return self.value.startswith("mlp_")


ATTN_SLOTS = (("q", ModuleKind.ATTENTION_Q), ("k", ModuleKind.ATTENTION_K),
              ("v", ModuleKind.ATTENTION_V), ("o", ModuleKind.ATTENTION_O))
MLP_SLOTS = (("gate", ModuleKind.MLP_GATE), ("up", ModuleKind.MLP_UP),
             ("down", ModuleKind.MLP_DOWN))


@dataclass(frozen=True)
class LayerSpec:
    """One FC slot. ``rank`` is ``None`` while the slot is dense."""

    name: str
    d_in: int
    d_out: int
    module_kind: ModuleKind
    compressible: bool
    rank: Optional[int] = None

    @property
    def factored(self) -> bool:
        return self.rank is not None

    @property
    def n_params(self) -> int:
        if self.rank is None:
            return self.d_in * self.d_out
        return self.rank * (self.d_in + self.d_out)

    @property
    def tensor_names(self) -> Tuple[str, ...]:
        if self.rank is None:
            return (self.name,)
        return (self.name + ".w0", self.name + ".w1")


@dataclass(frozen=True)
class ModelGraph:
    vocab: int
    d_model: int
    n_heads: int
    d_ff: int
    n_layers: int
    max_seq_len: int
    n_kv_heads: Optional[int] = None
    bias: bool = False
    ranks: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_kv_heads is None:
            object.__setattr__(self, "n_kv_heads", self.n_heads)
        for name in ("vocab", "d_model", "n_heads", "d_ff", "max_seq_len", "n_kv_heads"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValidationError("n_layers must be non-negative")
        if self.d_model % self.n_heads:
            raise ValidationError("d_model must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads:
            raise ValidationError("n_heads must be divisible by n_kv_heads")
        object.__setattr__(self, "ranks", dict(sorted(self.ranks.items())))
        known = {s.name for s in self._slots()}
        unknown = set(self.ranks) - known
        if unknown:
            raise ValidationError(f"ranks given for unknown slots: {sorted(unknown)}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def attention_mode(self) -> str:
        """``full``, ``multi_query`` (one shared K/V head) or ``grouped``."""
        if self.n_kv_heads == self.n_heads:
            return "full"
        if self.n_kv_heads == 1:
            return "multi_query"
        return "grouped"

    def _slots(self):
        d, hd = self.d_model, self.head_dim
        shapes = {
            "q": (d, self.n_heads * hd),
            "k": (d, self.n_kv_heads * hd),
            "v": (d, self.n_kv_heads * hd),
            "o": (self.n_heads * hd, d),
            "gate": (d, self.d_ff),
            "up": (d, self.d_ff),
            "down": (self.d_ff, d),
        }
        shared_kv = self.attention_mode != "full"
        for i in range(self.n_layers):
            for short, kind in ATTN_SLOTS:
                compressible = not (shared_kv and short in ("k", "v"))
                yield LayerSpec(f"blocks.{i}.attn.{short}", *shapes[short], kind, compressible)
            for short, kind in MLP_SLOTS:
                yield LayerSpec(f"blocks.{i}.mlp.{short}", *shapes[short], kind, True)

    def layers(self) -> List[LayerSpec]:
        return [replace(s, rank=self.ranks.get(s.name)) for s in self._slots()]

    def layer(self, name) -> LayerSpec:
        for s in self.layers():
            if s.name == name:
                return s
        raise KeyError(name)

    def with_ranks(self, updates: Dict[str, int]) -> "ModelGraph":
        return replace(self, ranks={**self.ranks, **updates})

    def dense(self) -> "ModelGraph":
        """The same architecture with every slot dense."""
        return replace(self, ranks={})

    def tensor_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """All tensors in canonical (file) order."""
        d = self.d_model
        out = {"tok_emb": (self.vocab, d), "pos_emb": (self.max_seq_len, d)}
        by_block: Dict[int, List[LayerSpec]] = {}
        for s in self.layers():
            by_block.setdefault(int(s.name.split(".")[1]), []).append(s)
        for i in range(self.n_layers):
            out[f"blocks.{i}.attn_norm"] = (d,)
            out[f"blocks.{i}.mlp_norm"] = (d,)
            for s in by_block[i]:
                if s.rank is None:
                    out[s.name] = (s.d_in, s.d_out)
                else:
                    out[s.name + ".w0"] = (s.d_in, s.rank)
                    out[s.name + ".w1"] = (s.rank, s.d_out)
                if self.bias:
                    out[s.name + ".bias"] = (s.d_out,)
        out["final_norm"] = (d,)
        return out

    def param_count(self) -> int:
        total = 0
        for shape in self.tensor_shapes().values():
            n = 1
            for k in shape:
                n *= k
            total += n
        return total

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_kv_heads": self.n_kv_heads,
            "d_ff": self.d_ff,
            "n_layers": self.n_layers,
            "max_seq_len": self.max_seq_len,
            "bias": self.bias,
            "ranks": dict(self.ranks),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        return cls(
            vocab=int(d["vocab"]),
            d_model=int(d["d_model"]),
            n_heads=int(d["n_heads"]),
            n_kv_heads=int(d.get("n_kv_heads") or d["n_heads"]),
            d_ff=int(d["d_ff"]),
            n_layers=int(d["n_layers"]),
            max_seq_len=int(d["max_seq_len"]),
            bias=bool(d.get("bias", False)),
            ranks={str(k): int(v) for k, v in d.get("ranks", {}).items()},
        )


def toy_graph(**overrides) -> ModelGraph:
    """Two-block toy model: d_model 64, MLP width 256."""
    cfg = dict(vocab=64, d_model=64, n_heads=4, d_ff=256, n_layers=2, max_seq_len=32)
    cfg.update(overrides)
    return ModelGraph(**cfg)


def desk_graph(**overrides) -> ModelGraph:
    """~0.5M-parameter model used for the recovery experiments."""
    cfg = dict(vocab=96, d_model=128, n_heads=4, d_ff=384, n_layers=2, max_seq_len=128)
    cfg.update(overrides)
    return ModelGraph(**cfg)
