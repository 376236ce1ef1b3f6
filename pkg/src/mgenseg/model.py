"""The full trainable system: one component bundle per modality and the
forward composition paths used by training and inference.

Per modality m the bundle holds an encoder, a common (lesion-free) decoder,
a residual decoder carrying the weight-shared segmentation path, a decoder
that renders the *other* modality's codes in m's appearance, and two
discriminators (absence/presence realism, modality realism). The healthy
reconstruction is strictly additive: diseased = healthy + residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .config import ModelConfig
from .networks import (
    Decoder,
    DualHeadDiscriminator,
    Encoder,
    PatchDiscriminator,
    ResSegDecoder,
    init_weights,
)

MODALITIES = ("S", "T")


@dataclass
class LatentPair:
    """Disentangled code: spatial common (anatomy) part plus pooled unique
    (lesion) vector, produced jointly by one encoder call."""

    common: torch.Tensor  # (B, C_c, h, w)
    unique: torch.Tensor  # (B, C_u)


def _broadcast_unique(common, unique):
    b, _, h, w = common.shape
    return unique[:, :, None, None].expand(b, unique.shape[1], h, w)


class ModalityBundle(nn.Module):
    def __init__(self, cfg: ModelConfig, unshared_latents=False):
        super().__init__()
        gated = cfg.attention_gates
        self.encoder = Encoder(cfg.base_width, cfg.n_down, cfg.latent_channels, cfg.unique_channels)
        # Separate encoder for the modality-translation task only under the
        # unshared-latents ablation; normally both tasks share one encoder.
        self.translation_encoder = (
            Encoder(cfg.base_width, cfg.n_down, cfg.latent_channels, cfg.unique_channels)
            if unshared_latents
            else None
        )
        self.common_decoder = Decoder(
            cfg.common_channels, cfg.base_width, cfg.n_down, out_activation="sigmoid", gated=gated
        )
        self.residual_decoder = ResSegDecoder(
            cfg.latent_channels, cfg.base_width, cfg.n_down, gated=gated
        )
        self.to_modality_decoder = Decoder(
            cfg.latent_channels, cfg.base_width, cfg.n_down, out_activation="sigmoid", gated=gated
        )
        self.disc_gen = DualHeadDiscriminator(cfg.base_width)
        self.disc_mod = PatchDiscriminator(cfg.base_width)


class MGenSeg(nn.Module):
    """Bi-modal translation + segmentation system."""

    def __init__(self, cfg: ModelConfig, unshared_latents=False):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.unshared_latents = unshared_latents
        self.bundles = nn.ModuleDict(
            {m: ModalityBundle(cfg, unshared_latents=unshared_latents) for m in MODALITIES}
        )
        init_weights(self)

    def bundle(self, modality):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        return self.bundles[modality]

    # --- encoding -----------------------------------------------------------
    def encode(self, x, modality, branch="shared"):
        """Latent pair plus skip features.

        branch="translation" picks the translation-only encoder when the
        unshared-latents ablation is active; otherwise the single shared
        encoder serves both tasks.
        """
        b = self.bundle(modality)
        enc = b.encoder
        if branch == "translation" and b.translation_encoder is not None:
            enc = b.translation_encoder
        latent, skips = enc(x)
        common, unique = enc.split(latent)
        return LatentPair(common=common, unique=unique), skips

    # --- decode helpers over precomputed codes ---------------------------------
    def decode_healthy(self, pair, skips, modality):
        return self.bundle(modality).common_decoder(pair.common, skips)

    def decode_residual(self, pair, skips, modality, u=None):
        u = pair.unique if u is None else u
        z = torch.cat([pair.common, _broadcast_unique(pair.common, u)], dim=1)
        return self.bundle(modality).residual_decoder(z, skips, mode="res")

    def decode_segmentation(self, pair, skips, modality):
        z = torch.cat([pair.common, _broadcast_unique(pair.common, pair.unique)], dim=1)
        logits = self.bundle(modality).residual_decoder(z, skips, mode="seg")
        return torch.sigmoid(logits)

    def decode_to_modality(self, pair, skips, target):
        z = torch.cat([pair.common, _broadcast_unique(pair.common, pair.unique)], dim=1)
        return self.bundle(target).to_modality_decoder(z, skips)

    # --- presence/absence translation ----------------------------------------
    def presence_to_absence(self, x, modality):
        """Remove the lesion; the residual is the additive change that puts
        it back: reconstruction = healthy + residual, exactly."""
        pair, skips = self.encode(x, modality)
        healthy = self.decode_healthy(pair, skips, modality)
        residual = self.decode_residual(pair, skips, modality)
        reconstruction = healthy + residual
        return {
            "healthy": healthy,
            "residual": residual,
            "reconstruction": reconstruction,
            "latent": pair,
            "skips": skips,
        }

    def absence_to_presence(self, x, modality, u_sample):
        """Reconstruct the healthy image and add a synthetic lesion generated
        from a code drawn from the unit normal prior."""
        pair, skips = self.encode(x, modality)
        if u_sample.shape != pair.unique.shape:
            raise ValueError(
                f"u_sample shape {tuple(u_sample.shape)} != unique code shape "
                f"{tuple(pair.unique.shape)}"
            )
        reconstruction = self.decode_healthy(pair, skips, modality)
        residual = self.decode_residual(pair, skips, modality, u=u_sample)
        diseased = reconstruction + residual
        return {
            "reconstruction": reconstruction,
            "residual": residual,
            "diseased": diseased,
            "latent": pair,
            "skips": skips,
        }

    # --- modality translation -------------------------------------------------
    def translate(self, x, source, target):
        """Render an image of `source` modality in `target` appearance, using
        the source encoder and the target bundle's rendering decoder."""
        if source == target:
            raise ValueError("translation requires distinct modalities")
        pair, skips = self.encode(x, source, branch="translation")
        return self.decode_to_modality(pair, skips, target)

    # --- segmentation -----------------------------------------------------------
    def segment(self, x, modality):
        """Per-pixel lesion probabilities in [0, 1]."""
        pair, skips = self.encode(x, modality)
        return self.decode_segmentation(pair, skips, modality)

    # --- discriminators -----------------------------------------------------------
    def discriminate(self, x, kind, modality, domain=None):
        """Score map from one discriminator head.

        kind="gen" judges absence/presence realism (domain required);
        kind="mod" judges modality realism.
        """
        b = self.bundle(modality)
        if kind == "gen":
            if domain not in ("A", "P"):
                raise ValueError("gen discriminator needs domain 'A' or 'P'")
            return b.disc_gen(x, domain)
        if kind == "mod":
            return b.disc_mod(x)
        raise ValueError(f"unknown discriminator kind {kind!r}")

    # --- parameter groups -----------------------------------------------------------
    def generator_parameters(self):
        params = []
        for m in MODALITIES:
            b = self.bundle(m)
            params.extend(b.encoder.parameters())
            if b.translation_encoder is not None:
                params.extend(b.translation_encoder.parameters())
            params.extend(b.common_decoder.parameters())
            params.extend(b.residual_decoder.parameters())
            params.extend(b.to_modality_decoder.parameters())
        return params

    def discriminator_groups(self):
        groups = {}
        for m in MODALITIES:
            b = self.bundle(m)
            groups[f"disc_gen_{m}"] = list(b.disc_gen.parameters())
            groups[f"disc_mod_{m}"] = list(b.disc_mod.parameters())
        return groups

    # --- attention inspection -----------------------------------------------------------
    def attention_maps(self, x, modality):
        """Coefficient maps per decoder for one batch, keyed by decoder name."""
        b = self.bundle(modality)
        pair, skips = self.encode(x, modality)
        z = torch.cat([pair.common, _broadcast_unique(pair.common, pair.unique)], dim=1)
        maps = {}
        _, maps["common_decoder"] = b.common_decoder(pair.common, skips, return_attention=True)
        _, maps["residual_decoder"] = b.residual_decoder(z, skips, mode="res", return_attention=True)
        _, maps["seg_decoder"] = b.residual_decoder(z, skips, mode="seg", return_attention=True)
        other = "T" if modality == "S" else "S"
        _, maps["to_modality_decoder"] = self.bundle(other).to_modality_decoder(
            z, skips, return_attention=True
        )
        return maps


def build_model(cfg: ModelConfig, seed=0, unshared_latents=False):
    torch.manual_seed(int(seed))
    return MGenSeg(cfg, unshared_latents=unshared_latents)


class SupervisedSegmenter(nn.Module):
    """Plain source-supervised segmentation net: the no-adaptation reference.

    Same encoder/decoder topology as one modality bundle's segmentation path,
    trained on annotated source slices only and applied as-is to the target.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.base_width, cfg.n_down, cfg.latent_channels, cfg.unique_channels)
        self.decoder = ResSegDecoder(cfg.latent_channels, cfg.base_width, cfg.n_down,
                                     gated=cfg.attention_gates)
        init_weights(self)

    def segment(self, x, modality=None):
        latent, skips = self.encoder(x)
        common, unique = self.encoder.split(latent)
        z = torch.cat([common, _broadcast_unique(common, unique)], dim=1)
        return torch.sigmoid(self.decoder(z, skips, mode="seg"))

    forward = segment


def build_baseline(cfg: ModelConfig, seed=0):
    torch.manual_seed(int(seed))
    return SupervisedSegmenter(cfg)


# --------------------------------------------------------------------------
# Checkpoints: a single archive of parameter tensors keyed by canonical
# component path, e.g. "S/encoder/stem.conv.weight" or
# "T/seg_head/classifier.weight", plus config hash and selection metadata.


def _canonical_items(model):
    items = {}
    for m in MODALITIES:
        b = model.bundle(m)
        components = {
            "encoder": b.encoder,
            "common_decoder": b.common_decoder,
            "to_modality_decoder": b.to_modality_decoder,
            "disc_gen": b.disc_gen,
            "disc_mod": b.disc_mod,
        }
        if b.translation_encoder is not None:
            components["translation_encoder"] = b.translation_encoder
        for comp_name, comp in components.items():
            for pname, tensor in comp.state_dict().items():
                items[f"{m}/{comp_name}/{pname}"] = tensor
        for pname, tensor in b.residual_decoder.state_dict().items():
            if pname.startswith("seg_norms."):
                key = f"{m}/seg_head/norm/{pname[len('seg_norms.'):]}"
            elif pname.startswith("classifier."):
                key = f"{m}/seg_head/{pname}"
            else:
                key = f"{m}/residual_decoder/{pname}"
            items[key] = tensor
    return items


def checkpoint_state(model):
    return {k: v.detach().clone() for k, v in _canonical_items(model).items()}


def save_checkpoint(path, model, config_hash="", epoch=0, val_dice=float("nan"), extra=None):
    payload = {
        "params": checkpoint_state(model),
        "config_hash": config_hash,
        "epoch": int(epoch),
        "val_dice": float(val_dice),
        "unshared_latents": model.unshared_latents,
        "model_config": model.cfg,
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)
    return path


def load_checkpoint(path, model=None):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if model is None:
        model = MGenSeg(payload["model_config"], unshared_latents=payload["unshared_latents"])
    own = _canonical_items(model)
    saved = payload["params"]
    missing = sorted(set(own) - set(saved))
    unexpected = sorted(set(saved) - set(own))
    if missing or unexpected:
        raise ValueError(f"checkpoint mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
    with torch.no_grad():
        for key, tensor in saved.items():
            own[key].copy_(tensor)
    return model, payload
