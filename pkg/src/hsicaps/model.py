"""Full network assembly: parameter construction, registry and forward.

The forward pass maps a batch of patches to class-capsule activities:
per-pixel slice features -> index enhancement -> spatial convolution ->
primary capsules -> routed class capsules. With tracked parameters the
same code builds the training graph; with detached parameters it runs as
plain numpy.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import capsule, spectral
from .errors import DataError


@dataclass
class Decoder:
    """Two dense layers reconstructing a one-hot class vector from the
    masked class-capsule activities."""

    fc1: spectral.DenseLayer
    fc2: spectral.DenseLayer

    def detached(self):
        return Decoder(self.fc1.detached(), self.fc2.detached())


@dataclass
class Model:
    spectral: spectral.SpectralParams
    caps: capsule.CapsuleParams
    decoder: Decoder
    patch_size: int
    n_class: int
    f_n: int
    slices: object  # segmented BandSliceSet

    def detached(self):
        m = Model(self.spectral.detached(), self.caps.detached(),
                  self.decoder.detached(), self.patch_size, self.n_class,
                  self.f_n, self.slices)
        return m

    def parameters(self):
        """Ordered (name, tensor) pairs; this order is the checkpoint order."""
        out = []
        for i, net in enumerate(self.spectral.nets):
            prefix = f"spectral.{i}"
            if net.dense is not None:
                out.append((f"{prefix}.dense.w", net.dense.weights))
                out.append((f"{prefix}.dense.b", net.dense.biases))
            else:
                out.append((f"{prefix}.conv1.w", net.conv1.weights))
                out.append((f"{prefix}.conv1.b", net.conv1.bias))
                out.append((f"{prefix}.conv2.w", net.conv2.weights))
                out.append((f"{prefix}.conv2.b", net.conv2.bias))
            out.append((f"{prefix}.fc1.w", net.fc1.weights))
            out.append((f"{prefix}.fc1.b", net.fc1.biases))
            out.append((f"{prefix}.fc2.w", net.fc2.weights))
            out.append((f"{prefix}.fc2.b", net.fc2.biases))
        out.append(("caps.conv.w", self.caps.conv.weights))
        out.append(("caps.conv.b", self.caps.conv.bias))
        out.append(("caps.primary.w", self.caps.primary.kernels))
        out.append(("caps.class.w", self.caps.classcaps.weights))
        out.append(("caps.class.b", self.caps.classcaps.biases))
        out.append(("decoder.fc1.w", self.decoder.fc1.weights))
        out.append(("decoder.fc1.b", self.decoder.fc1.biases))
        out.append(("decoder.fc2.w", self.decoder.fc2.weights))
        out.append(("decoder.fc2.b", self.decoder.fc2.biases))
        return out


def init_decoder(n_class: int, d_class: int, hidden: int, rng) -> Decoder:
    flat = n_class * d_class
    fc1 = spectral.DenseLayer(
        ad.parameter(ad.glorot_uniform(rng, (hidden, flat), flat, hidden)),
        ad.parameter(np.zeros(hidden)),
    )
    fc2 = spectral.DenseLayer(
        ad.parameter(ad.glorot_uniform(rng, (n_class, hidden), hidden, n_class)),
        ad.parameter(np.zeros(n_class)),
        activation="identity",
    )
    return Decoder(fc1, fc2)


def init_model(slices, n_class: int, run_cfg, rng, tri_combos=None) -> Model:
    """Build a seeded model for an already-segmented slice set.

    ``tri_combos`` freezes a fitted triangular-feature subset; None keeps
    every triple.
    """
    tcfg = run_cfg.training
    sp = spectral.init_spectral_params(slices, n_class, run_cfg.stage1, rng)
    sp.enhancement_on = tcfg.enhancement_on
    sp.tri_combos = tri_combos
    base = sp.base_width
    if sp.enhancement_on:
        if base < 3:
            raise DataError(
                f"enhancement needs >= 3 base features, got {base}; "
                "use more slices or classes, or disable enhancement"
            )
        cap = None if tri_combos is None else int(tri_combos.shape[0])
        f_n = spectral.feature_count(sp.n_slices, n_class, cap)
    else:
        f_n = base
    cp = capsule.init_capsule_params(tcfg.patch_size, f_n, n_class, run_cfg.stage2, rng)
    dec = init_decoder(n_class, cp.classcaps.d_class, tcfg.decoder_hidden, rng)
    return Model(sp, cp, dec, tcfg.patch_size, n_class, f_n, slices)


def forward(model: Model, patches: np.ndarray):
    """Batch forward pass.

    Args:
        model: tracked or detached model.
        patches: (N, s, s, B) reflectance windows.

    Returns:
        dict with x1 (N*s*s, base), features (N*s*s, F_N), poses
        (N, M, K), v (N, n_class, D) and lengths (N, n_class); entries are
        tensors when the model parameters are tracked.
    """
    N, s1, s2, B = patches.shape
    if s1 != model.patch_size or s2 != model.patch_size:
        raise DataError(
            f"patch shape {s1}x{s2} does not match model patch size {model.patch_size}"
        )
    pixels = patches.reshape(N * s1 * s2, B).astype(np.float64)
    x1 = spectral.base_features(pixels, model.spectral)
    feats = spectral.enhanced_features(x1, model.spectral)
    fmap = ad.reshape(feats, (N, s1, s2, model.f_n))
    o = capsule.conv2d_batch(fmap, model.caps.conv.weights, model.caps.conv.bias,
                             model.caps.conv.stride, model.caps.conv.activation)
    poses = capsule.primary_capsules_batch(o, model.caps.primary)
    u_hat = capsule.predict_vectors(poses, model.caps.classcaps)
    v, _, _ = capsule.dynamic_routing(u_hat, model.caps.routing_iterations)
    lengths = ad.norm(v, axis=-1)
    return {"x1": x1, "features": feats, "poses": poses, "v": v, "lengths": lengths}


def predict_lengths(model: Model, patches: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Class-capsule lengths for many patches using a detached model."""
    detached = model.detached()
    chunks = []
    for lo in range(0, patches.shape[0], batch_size):
        out = forward(detached, patches[lo : lo + batch_size])
        chunks.append(np.asarray(out["lengths"]))
    return np.concatenate(chunks, axis=0)
