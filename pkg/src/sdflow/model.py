"""The full model: static encoder, conditional sequence flow and prior flow."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .encoder import GaussianCode, StaticEncoder, aggregate_time, encode_frame
from .flows import PriorFlow, SequenceFlow
from .rng import stream


@dataclass(frozen=True)
class ModelConfig:
    n: int
    n_f: int
    enc_hidden: tuple = (64, 64)
    flow_layers: int = 4
    cond_hidden: tuple = (64, 64)
    rnn_width: int = 64
    ctx_dim: int = 32
    prior_layers: int = 4
    prior_hidden: tuple = (64, 64)
    scale_bound: float = 5.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


class SDModel:
    def __init__(self, config: ModelConfig):
        self.config = c = config
        self.encoder = StaticEncoder(c.n, c.n_f, c.enc_hidden)
        self.flow = SequenceFlow(c.n, c.n_f, c.flow_layers, c.cond_hidden, c.rnn_width,
                                 c.ctx_dim, c.scale_bound)
        self.prior = PriorFlow(c.n_f, c.prior_layers, c.prior_hidden, c.scale_bound)

    def init_params(self, seed: int, zero_last: bool = True) -> dict[str, np.ndarray]:
        params = self.encoder.init_params(stream(seed, "init", 0))
        params.update(self.flow.init_params(stream(seed, "init", 1), zero_last))
        params.update(self.prior.init_params(stream(seed, "init", 2), zero_last))
        return params

    # inference helpers (numpy in, numpy out)

    def frame_codes(self, P, x) -> GaussianCode:
        return encode_frame(self.encoder, P, x).numpy()

    def static_code(self, P, x) -> GaussianCode:
        """Aggregated code ``q(f | x_{1:T})`` for a batch ``(B, T, n)``."""
        return aggregate_time(encode_frame(self.encoder, P, x), axis=1).numpy()

    def broadcast(self, f: np.ndarray, T: int) -> np.ndarray:
        return np.repeat(np.asarray(f)[:, None, :], T, axis=1)

    def dynamic_codes(self, P, x, f) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        lam, _ = self.flow.transform(P, x, self.broadcast(f, x.shape[1]))
        return lam.data

    def generate(self, P, f, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        return self.flow.generate(P, self.broadcast(f, lam.shape[1]), lam)
