from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class ModelConfig:
    """Shape and mechanism settings shared by the pointer model and the baseline.

    ``n_heads`` only affects the baseline.  ``candidate_budget`` (K),
    ``local_window`` and ``n_strided_anchors`` only matter in candidate
    scoring mode.
    """

    vocab_size: int
    n_layers: int = 6
    d_model: int = 256
    n_heads: int = 8
    max_seq_len: int = 2048
    causal: bool = True
    scoring_mode: str = "candidate"
    candidate_budget: int = 32
    local_window: int = 16
    n_strided_anchors: int = 8
    chain_combine: str = "concat"
    ffn_mult: int = 4
    ffn_activation: str = "relu"

    def __post_init__(self):
        if self.vocab_size < 1 or self.n_layers < 1 or self.d_model < 1:
            raise ValueError("vocab_size, n_layers and d_model must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.scoring_mode not in ("dense", "candidate"):
            raise ValueError(f"scoring_mode must be 'dense' or 'candidate', got {self.scoring_mode!r}")
        if self.chain_combine not in ("concat", "add"):
            raise ValueError(f"chain_combine must be 'concat' or 'add', got {self.chain_combine!r}")
        if self.ffn_activation != "relu":
            raise ValueError("only the relu FFN activation is implemented")
        if self.scoring_mode == "candidate":
            need = self.local_window + self.n_strided_anchors + 2
            if self.candidate_budget < need:
                raise ValueError(
                    f"candidate_budget={self.candidate_budget} < local_window + "
                    f"n_strided_anchors + 2 = {need}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
