"""Polarization-driven interaction predictor f(theta): (alpha, zeta, gamma, |prod Gamma|) -> (beta, Gamma).

Wiring::

    PosEnc(alpha) ++ Embed(zeta) -> latent MLP -> h
    h -> angle branch -> (sin, cos) -> beta
    h -> perpendicular branch -> |Gamma_perp|
    h -> parallel branch      -> |Gamma_par|
    [|Gamma_perp|, |Gamma_par|, |prod Gamma|, PosEnc(gamma)] -> fusion -> |Gamma|

Each branch is ``block(ffn1) -> Dense+ReLU adapter -> block(ffn2) -> head``;
the fusion module prepends a ``Dense+ReLU`` lift to ``ffn1[0]`` features.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .nn import Dense, Embedding, ParamGroup, PosEnc, ReLU, ResidualBlock, Sequential, Sigmoid

GROUPS = ("Embedding", "LatentMlp", "AngleBranch", "PerpBranch", "ParBranch", "FusionModule")
CHECKPOINT_FORMAT = "genert-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PredictorConfig:
    class_vocab: int = 3
    embedding_dim: int = 5
    latent_hidden: int = 32
    latent_out: int = 64
    ffn1: tuple = (64, 32, 64)
    ffn2: tuple = (32, 16, 32)
    pos_enc_L: int = 4
    residual: bool = True
    trainable_groups: frozenset = field(default_factory=lambda: frozenset({"FusionModule"}))

    def __post_init__(self):
        object.__setattr__(self, "ffn1", tuple(int(x) for x in self.ffn1))
        object.__setattr__(self, "ffn2", tuple(int(x) for x in self.ffn2))
        object.__setattr__(self, "trainable_groups", frozenset(self.trainable_groups))

    def validate(self):
        if self.class_vocab < 1:
            raise InvalidConfig("class_vocab must be >= 1")
        dims = (self.embedding_dim, self.latent_hidden, self.latent_out, self.pos_enc_L) + self.ffn1 + self.ffn2
        if min(dims) < 1:
            raise InvalidConfig("all layer widths and pos_enc_L must be positive")
        if len(self.ffn1) != 3 or len(self.ffn2) != 3:
            raise InvalidConfig("ffn blocks are (input, hidden, output) triples")
        for blk in (self.ffn1, self.ffn2):
            if blk[0] != blk[2]:
                raise InvalidConfig(f"ffn block {blk} needs equal input and output widths")
        if self.latent_out != self.ffn1[0]:
            raise InvalidConfig("latent_out must match the first ffn block input width")
        unknown = set(self.trainable_groups) - set(GROUPS)
        if unknown:
            raise InvalidConfig(f"unknown trainable groups {sorted(unknown)}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ffn1"], d["ffn2"] = list(self.ffn1), list(self.ffn2)
        d["trainable_groups"] = sorted(self.trainable_groups)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class PredictorOutput:
    beta: np.ndarray
    gamma_perp_mag: np.ndarray
    gamma_par_mag: np.ndarray
    gamma_eff_mag: np.ndarray


def _branch(cfg: PredictorConfig, group, rng, n_out: int, lift_from: int | None = None) -> list:
    layers = []
    if lift_from is not None:
        layers += [Dense(lift_from, cfg.ffn1[0], group, rng), ReLU()]
    layers += [
        ResidualBlock(cfg.ffn1, group, rng, cfg.residual),
        Dense(cfg.ffn1[2], cfg.ffn2[0], group, rng), ReLU(),
        ResidualBlock(cfg.ffn2, group, rng, cfg.residual),
        Dense(cfg.ffn2[2], n_out, group, rng),
    ]
    return layers


class Network:
    """Parameters and wiring of the predictor; see :func:`build_network`."""

    def __init__(self, cfg: PredictorConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.groups = {name: ParamGroup(name) for name in GROUPS}
        rngs = {name: np.random.default_rng([seed, i]) for i, name in enumerate(GROUPS)}
        L = cfg.pos_enc_L
        self.pe = PosEnc(L)
        self.embed = Embedding(cfg.class_vocab, cfg.embedding_dim, self.groups["Embedding"], rngs["Embedding"])
        g, r = self.groups["LatentMlp"], rngs["LatentMlp"]
        self.latent = Sequential([Dense(2 * L + cfg.embedding_dim, cfg.latent_hidden, g, r), ReLU(),
                                  Dense(cfg.latent_hidden, cfg.latent_out, g, r), ReLU()])
        self.angle = Sequential(_branch(cfg, self.groups["AngleBranch"], rngs["AngleBranch"], 2))
        self.perp = Sequential(_branch(cfg, self.groups["PerpBranch"], rngs["PerpBranch"], 1) + [Sigmoid()])
        self.par = Sequential(_branch(cfg, self.groups["ParBranch"], rngs["ParBranch"], 1) + [Sigmoid()])
        self.fusion = Sequential(_branch(cfg, self.groups["FusionModule"], rngs["FusionModule"], 1,
                                         lift_from=3 + 2 * L) + [Sigmoid()])
        self.modules = {"Embedding": self.embed, "LatentMlp": self.latent, "AngleBranch": self.angle,
                        "PerpBranch": self.perp, "ParBranch": self.par, "FusionModule": self.fusion}
        for grp in self.groups.values():
            grp.finalize()
        self.set_trainable(cfg.trainable_groups)

    # ------------------------------------------------------------------ bookkeeping

    def set_trainable(self, names):
        names = frozenset(names)
        unknown = names - set(GROUPS)
        if unknown:
            raise InvalidConfig(f"unknown trainable groups {sorted(unknown)}")
        self.trainable = names
        for name, mod in self.modules.items():
            if isinstance(mod, Sequential):
                mod.set_frozen(name not in names)
            else:
                mod.frozen = name not in names

    @property
    def n_params(self) -> int:
        return sum(g.size for g in self.groups.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: g.data.copy() for name, g in self.groups.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]):
        for name, data in snap.items():
            self.groups[name].data[...] = data

    def zero_grad(self):
        for g in self.groups.values():
            g.zero_grad()

    # ------------------------------------------------------------------ forward pieces

    def features(self, alpha, zeta):
        pe, c_pe = self.pe.forward(alpha)
        emb, c_emb = self.embed.forward(np.asarray(zeta).reshape(-1))
        h, c_lat = self.latent.forward(np.concatenate([pe, emb], axis=1))
        return h, (c_pe, c_emb, c_lat)

    def features_backward(self, dh, cache):
        _, c_emb, c_lat = cache
        if "LatentMlp" not in self.trainable and "Embedding" not in self.trainable:
            return
        dx = self.latent.backward(dh, c_lat, "Embedding" in self.trainable)
        if dx is not None:
            self.embed.backward(dx[:, 2 * self.cfg.pos_enc_L:], c_emb)

    def angle_forward(self, h):
        z, c = self.angle.forward(h)
        norm = np.sqrt(np.sum(z * z, axis=1, keepdims=True))
        u = z / np.maximum(norm, 1e-12)
        return u, (c, u, norm)

    def angle_backward(self, du, cache, need_input_grad=True):
        c, u, norm = cache
        dz = (du - u * np.sum(u * du, axis=1, keepdims=True)) / np.maximum(norm, 1e-12)
        return self.angle.backward(dz, c, need_input_grad)

    def fusion_input(self, g_perp, g_par, cum, gamma_offset):
        pe, c_pe = self.pe.forward(gamma_offset)
        x = np.concatenate([np.reshape(g_perp, (-1, 1)), np.reshape(g_par, (-1, 1)),
                            np.reshape(np.asarray(cum, float), (-1, 1)), pe], axis=1)
        return x

    def predict(self, alpha, zeta, gamma_offset, cum_gamma_mag) -> PredictorOutput:
        alpha = np.atleast_1d(np.asarray(alpha, float))
        h, _ = self.features(alpha, zeta)
        u, _ = self.angle_forward(h)
        gp, _ = self.perp.forward(h)
        gpar, _ = self.par.forward(h)
        cum = np.broadcast_to(np.asarray(cum_gamma_mag, float), alpha.shape)
        gamma_offset = np.broadcast_to(np.asarray(gamma_offset, float), alpha.shape)
        g, _ = self.fusion.forward(self.fusion_input(gp, gpar, cum, gamma_offset))
        beta = np.clip(np.arctan2(u[:, 0], u[:, 1]), 0.0, 0.5 * math.pi)
        return PredictorOutput(beta=beta, gamma_perp_mag=np.clip(gp[:, 0], 0.0, 1.0),
                               gamma_par_mag=np.clip(gpar[:, 0], 0.0, 1.0),
                               gamma_eff_mag=np.clip(g[:, 0], 0.0, 1.0))


def build_network(cfg: PredictorConfig = PredictorConfig(), seed: int = 0) -> Network:
    return Network(cfg, seed)


def predict(net: Network, alpha, zeta, gamma_offset, cum_gamma_mag) -> PredictorOutput:
    return net.predict(alpha, zeta, gamma_offset, cum_gamma_mag)


class NeuralInteractionModel:
    """Interaction model for the tracer backed by a :class:`Network`.

    The predicted magnitude carries the same fixed pi phase as the oracle; the
    polarization vector is transported geometrically by the tracer.
    """

    specular = False

    def __init__(self, net: Network):
        self.net = net

    def __call__(self, batch):
        out = self.net.predict(batch.alpha, batch.class_id, batch.gamma_offset, np.abs(batch.cum_gamma))
        return out.beta, -out.gamma_eff_mag.astype(complex), None


# ----------------------------------------------------------------------------- checkpoints


def checkpoint_dict(net: Network) -> dict:
    groups = {}
    for name, g in net.groups.items():
        groups[name] = {"tensors": [[n, list(s)] for n, s in g.specs], "data": [float(x) for x in g.data]}
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "seed": net.seed,
            "config": net.cfg.to_dict(), "groups": groups}


def save_checkpoint(net: Network, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_dict(net), sort_keys=True) + "\n")
    return path


def network_from_checkpoint(doc: dict) -> Network:
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise InvalidConfig("not a supported checkpoint document")
    net = Network(PredictorConfig.from_dict(doc["config"]), int(doc.get("seed", 0)))
    for name, entry in doc["groups"].items():
        if name not in net.groups:
            raise InvalidConfig(f"unknown parameter group {name!r} in checkpoint")
        g = net.groups[name]
        shapes = [[n, list(s)] for n, s in g.specs]
        if entry["tensors"] != shapes:
            raise InvalidConfig(f"checkpoint group {name} does not match the configured wiring")
        g.data[...] = np.asarray(entry["data"], dtype=np.float64)
    return net


def load_checkpoint(path) -> Network:
    return network_from_checkpoint(json.loads(Path(path).read_text()))
