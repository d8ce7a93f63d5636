"""Gaussian VAE with an isotropic decoder variance, denoising ELBO training,
and the ``JVAE1`` checkpoint format."""

import hashlib
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from jpmap.neuralnet import Adam, Mlp

log = logging.getLogger(__name__)

MAGIC = "JVAE1"
LOG_2PI = math.log(2.0 * math.pi)


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class VaeModel:
    """Encoder ``x -> (mean, log-variance)``, decoder ``z -> mean image``.

    The decoder covariance is ``gamma2 * I`` with a scalar ``gamma2`` that does
    not depend on ``z``.
    """

    encoder: Mlp
    decoder: Mlp
    gamma2: float
    sigma_dvae: float = 0.0

    def __post_init__(self):
        self.gamma2 = float(self.gamma2)
        self.sigma_dvae = float(self.sigma_dvae)
        if not self.gamma2 > 0:
            raise ValueError("gamma2 must be positive")
        enc, dec = self.encoder.sizes, self.decoder.sizes
        if enc[-1] != 2 * dec[0] or enc[0] != dec[-1]:
            raise ValueError(f"encoder sizes {enc} inconsistent with decoder sizes {dec}")

    @classmethod
    def create(cls, data_dim=784, latent_dim=8, hidden=(500, 500), rng=None, gamma2=0.1, sigma_dvae=0.0):
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = list(hidden)
        encoder = Mlp.init([data_dim] + hidden + [2 * latent_dim], rng)
        decoder = Mlp.init([latent_dim] + hidden[::-1] + [data_dim], rng)
        return cls(encoder, decoder, gamma2, sigma_dvae)

    @property
    def data_dim(self):
        return self.decoder.sizes[-1]

    @property
    def latent_dim(self):
        return self.decoder.sizes[0]

    def encode(self, x):
        """Encoder mean and diagonal variances (strictly positive)."""
        out = self.encoder(x)
        l = self.latent_dim
        return out[..., :l], np.exp(out[..., l:])

    def decode(self, z):
        return self.decoder(z)

    def decode_vjp(self, z, v):
        """Return ``(mu_theta(z), J(z)^T v)`` with J the decoder Jacobian."""
        out, tape = self.decoder.forward(z)
        _, gz = self.decoder.backward(tape, v, param_grads=False)
        return out, gz

    def copy(self):
        return VaeModel(self.encoder.copy(), self.decoder.copy(), self.gamma2, self.sigma_dvae)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-4
    sigma_dvae: float = 15.0 / 255.0
    seed: int = 0
    latent_dim: int = 8
    hidden: tuple = (500, 500)
    gamma2_init: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.sigma_dvae < 0:
            raise ValueError(f"invalid training configuration: {self}")


@dataclass
class VaeGrads:
    encoder: list
    decoder: list
    log_gamma2: float


def kl_standard_normal(mu, var):
    """KL(N(mu, diag(var)) || N(0, I)), summed over the last axis."""
    return 0.5 * np.sum(mu * mu + var - np.log(var) - 1.0, axis=-1)


def dvae_loss_and_grads(model, x, rng=None, noise=None, eps=None):
    """Negative denoising ELBO averaged over a batch, with its gradients.

    ``noise`` (corruption draw) and ``eps`` (reparameterization draw) may be
    passed explicitly to freeze the Monte Carlo sample; otherwise they are
    drawn from ``rng``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    l = model.latent_dim
    if n == 0:
        raise ValueError("empty batch")
    if noise is None:
        noise = rng.standard_normal(x.shape)
    if eps is None:
        eps = rng.standard_normal((n, l))
    x_tilde = x + model.sigma_dvae * noise

    enc_out, enc_tape = model.encoder.forward(x_tilde)
    mu, logvar = enc_out[:, :l], enc_out[:, l:]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    x_hat, dec_tape = model.decoder.forward(z)

    g2 = model.gamma2
    resid = x_hat - x
    sq = np.sum(resid * resid, axis=1)
    var = std * std
    recon = 0.5 * d * (LOG_2PI + math.log(g2)) + sq / (2.0 * g2)
    kl = kl_standard_normal(mu, var)
    loss = float(np.mean(recon + kl))

    # everything below is d(mean loss)/d(.)
    dx_hat = resid / (g2 * n)
    dec_grads, dz = model.decoder.backward(dec_tape, dx_hat)
    dmu = dz + mu / n
    dlogvar = dz * eps * 0.5 * std + 0.5 * (var - 1.0) / n
    enc_grads, _ = model.encoder.backward(enc_tape, np.hstack([dmu, dlogvar]), param_grads=True)
    dlog_g2 = float(np.mean(0.5 * d - sq / (2.0 * g2)))
    return loss, VaeGrads(enc_grads, dec_grads, dlog_g2)


def train_dvae(data, config, model=None, on_epoch=None):
    """Train a denoising VAE with Adam on images in [0, 1].

    Returns ``(model, epoch_losses)``. ``data`` is an ``(n, d)`` array.
    Training is deterministic given ``config.seed``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("data must be a non-empty (n, d) array")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = VaeModel.create(
            data.shape[1], config.latent_dim, config.hidden, rng, config.gamma2_init, config.sigma_dvae
        )
    else:
        model = model.copy()
        model.sigma_dvae = config.sigma_dvae
    log_g2 = np.array([math.log(model.gamma2)])
    params = model.encoder.params() + model.decoder.params() + [log_g2]
    opt = Adam(lr=config.lr)
    losses = []
    n = len(data)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = data[order[start : start + config.batch_size]]
            loss, g = dvae_loss_and_grads(model, batch, rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.step(params, g.encoder + g.decoder + [np.array([g.log_gamma2])])
            model.gamma2 = float(math.exp(log_g2[0]))
            total += loss * len(batch)
        losses.append(total / n)
        log.info("epoch %d loss %.4f gamma2 %.5g", epoch + 1, losses[-1], model.gamma2)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1], model)
    if not (model.encoder.all_finite() and model.decoder.all_finite()):
        raise TrainingError("training produced non-finite parameters")
    return model, losses


def sample_prior(model, n, rng, z=None):
    """Decoder means for ``n`` latent draws from N(0, I) (or for given ``z``)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if z is None:
        z = rng.standard_normal((n, model.latent_dim))
    else:
        z = np.broadcast_to(np.asarray(z, dtype=np.float64), (n, model.latent_dim))
    return model.decode(z)


# -- checkpoint -------------------------------------------------------------


def _checksum(payload):
    return struct.unpack("<Q", hashlib.blake2b(payload, digest_size=8).digest())[0]


def model_to_bytes(model):
    header = "\n".join(
        [
            MAGIC,
            f"data_dim {model.data_dim}",
            f"latent_dim {model.latent_dim}",
            "encoder " + " ".join(map(str, model.encoder.sizes)),
            "decoder " + " ".join(map(str, model.decoder.sizes)),
            f"sigma_dvae {model.sigma_dvae!r}",
            f"gamma2 {model.gamma2!r}",
            "",
        ]
    ).encode("ascii")
    body = b"".join(
        np.ascontiguousarray(p, dtype="<f8").tobytes()
        for net in (model.encoder, model.decoder)
        for p in net.params()
    )
    payload = header + body
    return payload + struct.pack("<Q", _checksum(payload))


def model_from_bytes(blob):
    if not blob.startswith(MAGIC.encode() + b"\n"):
        raise CheckpointError("not a JVAE1 checkpoint (bad magic)")
    lines, pos = [], 0
    for _ in range(7):
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError("truncated header")
        lines.append(blob[pos:end].decode("ascii"))
        pos = end + 1
    try:
        fields = dict(line.split(" ", 1) for line in lines[1:])
        data_dim = int(fields["data_dim"])
        latent_dim = int(fields["latent_dim"])
        enc_sizes = [int(v) for v in fields["encoder"].split()]
        dec_sizes = [int(v) for v in fields["decoder"].split()]
        sigma_dvae = float(fields["sigma_dvae"])
        gamma2 = float(fields["gamma2"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    if enc_sizes[0] != data_dim or dec_sizes[-1] != data_dim or dec_sizes[0] != latent_dim or enc_sizes[-1] != 2 * latent_dim:
        raise CheckpointError("layer sizes inconsistent with declared dimensions")

    n_floats = sum(o * i + o for sizes in (enc_sizes, dec_sizes) for i, o in zip(sizes[:-1], sizes[1:]))
    expected = pos + 8 * n_floats + 8
    if len(blob) != expected:
        raise CheckpointError(f"checkpoint has {len(blob)} bytes, expected {expected}")
    (stored,) = struct.unpack("<Q", blob[-8:])
    if stored != _checksum(blob[:-8]):
        raise CheckpointError("checksum mismatch")

    flat = np.frombuffer(blob, dtype="<f8", count=n_floats, offset=pos).astype(np.float64)
    nets, k = [], 0
    for sizes in (enc_sizes, dec_sizes):
        weights, biases = [], []
        for i, o in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[k : k + o * i].reshape(o, i).copy())
            k += o * i
            biases.append(flat[k : k + o].copy())
            k += o
        nets.append(Mlp(weights, biases))
    return VaeModel(nets[0], nets[1], gamma2, sigma_dvae)


def save_model(model, path):
    blob = model_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
