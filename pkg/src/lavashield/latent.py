"""Contrastive autoencoder over grid observations, gradients by hand.

The encoder flattens an observation and passes it through one ReLU hidden
layer into a latent vector; the decoder mirrors that shape back out.  Batches
are scored with a weighted sum of per-observation squared reconstruction
error and a pairwise contrastive term on the latents: same-label pairs pay
their squared distance, different-label pairs pay a hinge that saturates once
the squared distance reaches the margin.  Training a classifier head is
deliberately avoided; the safe/unsafe structure is carried entirely by latent
geometry.

Everything runs in float64 numpy with analytic gradients, which keeps the
finite-difference checks tight and the whole module dependency-free.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .gridworld import (
    GridSpec,
    SafetyLabel,
    classify_state,
    iter_valid_states,
    observe,
    state_index,
    step,
)


@dataclass
class EncoderConfig:
    margin: float = 10.0            # squared-distance target for unlike pairs
    recon_weight: float = 100.0
    contrast_weight: float = 0.01
    learning_rate: float = 2.5e-4
    batch_size: int = 32
    latent_dim: int = 50
    hidden_dim: int = 256
    replay_capacity: int = 4096

    def __post_init__(self):
        if self.margin <= 0.0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.recon_weight < 0.0 or self.contrast_weight < 0.0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class LabeledObservation:
    obs: np.ndarray
    safe: int  # 1 when the observed state is Safe, else 0


class LabeledReplayBuffer:
    """FIFO ring of labeled observations."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self._items: deque[LabeledObservation] = deque(maxlen=capacity)

    def add(self, item: LabeledObservation) -> None:
        self._items.append(item)

    def extend(self, items) -> None:
        for item in items:
            self.add(item)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> LabeledObservation:
        return self._items[i]

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform batch without replacement."""
        if batch_size > len(self):
            raise ValueError("batch larger than buffer")
        idx = rng.choice(len(self), size=batch_size, replace=False)
        return [self._items[int(i)] for i in idx]


def label_observation(spec: GridSpec, state) -> LabeledObservation:
    safe = classify_state(spec, state) == SafetyLabel.SAFE
    return LabeledObservation(observe(spec, state), int(safe))


def enumerate_labeled_observations(spec: GridSpec) -> list[LabeledObservation]:
    """Oracle labeling of every non-wall state."""
    return [label_observation(spec, s) for s in iter_valid_states(spec)]


def rollout_labeled_observations(spec: GridSpec, steps: int,
                                 rng: np.random.Generator,
                                 labeling: str = "oracle"):
    """Collect labeled observations from a uniform-random behavior policy.

    With experiential labeling a state index is marked unsafe only once a
    violating transition from it (or into it) has actually been observed;
    everything else keeps a provisional safe label.
    """
    if labeling not in ("oracle", "experiential"):
        raise ValueError(f"unknown labeling mode {labeling!r}")
    from .gridworld import Action, start_state

    visited: list[tuple[int, np.ndarray]] = []
    unsafe_indices: set[int] = set()
    state = start_state(spec)
    for _ in range(steps):
        s_idx = state_index(spec, state.row, state.col, state.direction)
        obs = observe(spec, state)
        if labeling == "oracle":
            safe = classify_state(spec, state) == SafetyLabel.SAFE
            visited.append((int(safe), obs))
        else:
            visited.append((s_idx, obs))
        tr = step(spec, state, Action(int(rng.integers(3))))
        if tr.violated:
            ns = tr.next_state
            n_idx = state_index(spec, ns.row, ns.col, ns.direction)
            unsafe_indices.update((s_idx, n_idx))
            if labeling == "oracle":
                visited.append((0, observe(spec, ns)))
            else:
                visited.append((n_idx, observe(spec, ns)))
        state = start_state(spec) if tr.terminated else tr.next_state
    if labeling == "oracle":
        return [LabeledObservation(obs, safe) for safe, obs in visited]
    return [LabeledObservation(obs, int(idx not in unsafe_indices))
            for idx, obs in visited]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class EncoderModel:
    obs_shape: tuple[int, int, int]
    hidden_dim: int
    latent_dim: int
    params: np.ndarray  # flat float64 vector

    @property
    def obs_size(self) -> int:
        c, h, w = self.obs_shape
        return c * h * w


def _param_shapes(obs_size: int, hidden: int, latent: int):
    return [
        ("enc_w1", (obs_size, hidden)),
        ("enc_b1", (hidden,)),
        ("enc_w2", (hidden, latent)),
        ("enc_b2", (latent,)),
        ("dec_w1", (latent, hidden)),
        ("dec_b1", (hidden,)),
        ("dec_w2", (hidden, obs_size)),
        ("dec_b2", (obs_size,)),
    ]


def _unpack(model: EncoderModel) -> dict[str, np.ndarray]:
    views = {}
    offset = 0
    for name, shape in _param_shapes(model.obs_size, model.hidden_dim,
                                     model.latent_dim):
        size = int(np.prod(shape))
        views[name] = model.params[offset:offset + size].reshape(shape)
        offset += size
    if offset != model.params.size:
        raise ValueError("parameter vector does not match the model shape")
    return views


def param_count(obs_size: int, hidden: int, latent: int) -> int:
    return sum(int(np.prod(shape))
               for _, shape in _param_shapes(obs_size, hidden, latent))


def init_model(obs_shape: tuple[int, int, int], cfg: EncoderConfig,
               seed: int) -> EncoderModel:
    """Weights uniform in +/- 1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    obs_size = int(np.prod(obs_shape))
    chunks = []
    for name, shape in _param_shapes(obs_size, cfg.hidden_dim, cfg.latent_dim):
        if name.endswith("b1") or name.endswith("b2"):
            chunks.append(np.zeros(int(np.prod(shape))))
        else:
            bound = 1.0 / np.sqrt(shape[0])
            chunks.append(rng.uniform(-bound, bound, int(np.prod(shape))))
    return EncoderModel(tuple(obs_shape), cfg.hidden_dim, cfg.latent_dim,
                        np.concatenate(chunks))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def encode_batch(model: EncoderModel, x: np.ndarray) -> np.ndarray:
    """Encode a batch of observations, accepting either flat rows of shape
    (n, obs_size) or stacked raw observations of shape (n, *obs_shape)."""
    x = np.asarray(x).reshape(len(x), -1)
    p = _unpack(model)
    hidden = relu(x @ p["enc_w1"] + p["enc_b1"])
    return hidden @ p["enc_w2"] + p["enc_b2"]


def encode(model: EncoderModel, obs: np.ndarray) -> np.ndarray:
    return encode_batch(model, obs.reshape(1, -1))[0]


def decode(model: EncoderModel, z: np.ndarray) -> np.ndarray:
    p = _unpack(model)
    hidden = relu(np.atleast_2d(z) @ p["dec_w1"] + p["dec_b1"])
    flat = hidden @ p["dec_w2"] + p["dec_b2"]
    if z.ndim == 1:
        return flat[0].reshape(model.obs_shape)
    return flat.reshape((len(flat),) + model.obs_shape)


def reconstruction_loss(model: EncoderModel, obs: np.ndarray) -> float:
    """Squared L2 error of the round trip through the bottleneck."""
    recon = decode(model, encode(model, obs))
    return float(np.sum((obs - recon) ** 2))


def contrastive_loss(z_a: np.ndarray, z_b: np.ndarray, same_class: bool,
                     margin: float) -> float:
    dist_sq = float(np.sum((z_a - z_b) ** 2))
    if same_class:
        return dist_sq
    return max(0.0, margin - dist_sq)


def batch_loss(model: EncoderModel, batch, cfg: EncoderConfig) -> float:
    loss, _ = batch_loss_and_grad(model, batch, cfg, want_grad=False)
    return loss


def batch_loss_and_grad(model: EncoderModel, batch, cfg: EncoderConfig,
                        want_grad: bool = True):
    """Weighted reconstruction + pairwise contrastive loss, with its exact
    gradient in the flat parameter layout.

    The pair term runs over unordered index pairs of the batch; labels are
    compared strictly, and the hinge contributes zero gradient at and beyond
    the margin.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    p = _unpack(model)
    x = np.stack([item.obs.reshape(-1) for item in batch])
    labels = np.array([item.safe for item in batch])

    enc_pre = x @ p["enc_w1"] + p["enc_b1"]
    enc_hidden = relu(enc_pre)
    z = enc_hidden @ p["enc_w2"] + p["enc_b2"]
    dec_pre = z @ p["dec_w1"] + p["dec_b1"]
    dec_hidden = relu(dec_pre)
    recon = dec_hidden @ p["dec_w2"] + p["dec_b2"]

    residual = recon - x
    recon_term = cfg.recon_weight * float(np.sum(residual ** 2))

    # pairwise squared latent distances
    sq_norms = np.sum(z ** 2, axis=1)
    dist_sq = sq_norms[:, None] + sq_norms[None, :] - 2.0 * (z @ z.T)
    np.fill_diagonal(dist_sq, 0.0)
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones_like(dist_sq, dtype=bool), k=1)
    hinge_active = (~same) & (dist_sq < cfg.margin)
    contrast_term = cfg.contrast_weight * (
        float(dist_sq[same & upper].sum())
        + float((cfg.margin - dist_sq)[hinge_active & upper].sum()))
    loss = recon_term + contrast_term
    if not want_grad:
        return loss, None

    # backward pass
    g_recon = 2.0 * cfg.recon_weight * residual
    g_dec_w2 = dec_hidden.T @ g_recon
    g_dec_b2 = g_recon.sum(axis=0)
    g_dec_hidden = g_recon @ p["dec_w2"].T
    g_dec_pre = g_dec_hidden * (dec_pre > 0.0)
    g_dec_w1 = z.T @ g_dec_pre
    g_dec_b1 = g_dec_pre.sum(axis=0)
    g_z = g_dec_pre @ p["dec_w1"].T

    # contrastive contribution: coefficient +1 per like pair, -1 per unlike
    # pair still inside the margin
    coeff = np.zeros_like(dist_sq)
    coeff[same] = 1.0
    coeff[hinge_active] = -1.0
    np.fill_diagonal(coeff, 0.0)
    g_z += 2.0 * cfg.contrast_weight * (
        coeff.sum(axis=1)[:, None] * z - coeff @ z)

    g_enc_w2 = enc_hidden.T @ g_z
    g_enc_b2 = g_z.sum(axis=0)
    g_enc_hidden = g_z @ p["enc_w2"].T
    g_enc_pre = g_enc_hidden * (enc_pre > 0.0)
    g_enc_w1 = x.T @ g_enc_pre
    g_enc_b1 = g_enc_pre.sum(axis=0)

    grad = np.concatenate([
        g_enc_w1.reshape(-1), g_enc_b1, g_enc_w2.reshape(-1), g_enc_b2,
        g_dec_w1.reshape(-1), g_dec_b1, g_dec_w2.reshape(-1), g_dec_b2,
    ])
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer and training loop
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0


def adam_init(n_params: int) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params))


def adam_update(params: np.ndarray, grad: np.ndarray, state: AdamState,
                learning_rate: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.step += 1
    state.first_moment = beta1 * state.first_moment + (1 - beta1) * grad
    state.second_moment = beta2 * state.second_moment + (1 - beta2) * grad ** 2
    m_hat = state.first_moment / (1 - beta1 ** state.step)
    v_hat = state.second_moment / (1 - beta2 ** state.step)
    params -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)


class EncoderTrainer:
    """Owns the model, the Adam moments, and the batch-sampling stream."""

    def __init__(self, model: EncoderModel, cfg: EncoderConfig, seed: int):
        self.model = model
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.adam = adam_init(model.params.size)

    def train_step(self, buffer: LabeledReplayBuffer) -> float:
        batch_size = min(self.cfg.batch_size, len(buffer))
        batch = buffer.sample(batch_size, self.rng)
        loss, grad = batch_loss_and_grad(self.model, batch, self.cfg)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise RuntimeError(
                f"non-finite training step: loss={loss!r}, "
                f"|grad|_max={np.max(np.abs(grad))!r}, "
                f"adam step {self.adam.step}")
        adam_update(self.model.params, grad, self.adam,
                    self.cfg.learning_rate)
        return loss

    def train(self, buffer: LabeledReplayBuffer, steps: int) -> list[float]:
        return [self.train_step(buffer) for _ in range(steps)]


# ---------------------------------------------------------------------------
# checkpoint: text header, blank line, raw little-endian float64 params
# ---------------------------------------------------------------------------

_CHECKPOINT_MAGIC = "lavashield-encoder v1"


def save_checkpoint(path, model: EncoderModel, cfg: EncoderConfig,
                    seed: int) -> None:
    header = [
        _CHECKPOINT_MAGIC,
        "obs_shape=" + ",".join(str(d) for d in model.obs_shape),
        f"hidden_dim={model.hidden_dim}",
        f"latent_dim={model.latent_dim}",
        f"margin={cfg.margin!r}",
        f"recon_weight={cfg.recon_weight!r}",
        f"contrast_weight={cfg.contrast_weight!r}",
        f"learning_rate={cfg.learning_rate!r}",
        f"batch_size={cfg.batch_size}",
        f"replay_capacity={cfg.replay_capacity}",
        f"seed={seed}",
        f"param_count={model.params.size}",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n\n").encode("ascii"))
        fh.write(np.ascontiguousarray(model.params, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[EncoderModel, EncoderConfig, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.index(b"\n\n")
    lines = blob[:sep].decode("ascii").splitlines()
    if lines[0] != _CHECKPOINT_MAGIC:
        raise ValueError("not an encoder checkpoint")
    fields = dict(ln.split("=", 1) for ln in lines[1:])
    obs_shape = tuple(int(d) for d in fields["obs_shape"].split(","))
    cfg = EncoderConfig(
        margin=float(fields["margin"]),
        recon_weight=float(fields["recon_weight"]),
        contrast_weight=float(fields["contrast_weight"]),
        learning_rate=float(fields["learning_rate"]),
        batch_size=int(fields["batch_size"]),
        latent_dim=int(fields["latent_dim"]),
        hidden_dim=int(fields["hidden_dim"]),
        replay_capacity=int(fields["replay_capacity"]),
    )
    params = np.frombuffer(blob[sep + 2:], dtype="<f8").astype(np.float64)
    expected = int(fields["param_count"])
    if params.size != expected:
        raise ValueError(f"checkpoint holds {params.size} parameters, "
                         f"header promises {expected}")
    model = EncoderModel(obs_shape, cfg.hidden_dim, cfg.latent_dim, params)
    _unpack(model)  # shape sanity check
    return model, cfg, int(fields["seed"])


def export_embeddings(path, spec: GridSpec, model: EncoderModel,
                      header: dict | None = None) -> None:
    """TSV of every non-wall state: index, oracle safe bit, latent coords."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in header.items())
                     + "\n")
        cols = "\t".join(f"z_{i + 1}" for i in range(model.latent_dim))
        fh.write(f"state_index\tsafe\t{cols}\n")
        for state in iter_valid_states(spec):
            item = label_observation(spec, state)
            z = encode(model, item.obs)
            idx = state_index(spec, state.row, state.col, state.direction)
            coords = "\t".join(repr(float(v)) for v in z)
            fh.write(f"{idx}\t{item.safe}\t{coords}\n")
