"""Building blocks: encoder, gated decoders, weight-shared residual/segmentation
decoder, and patch discriminators.

All nets are small strided-conv stacks with instance norm, sized for 2D
slices whose side is divisible by 2**n_down.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def init_weights(module, std=0.02):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            if getattr(m, "keep_init", False):
                continue
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return module


def _norm(ch):
    return nn.InstanceNorm2d(ch, affine=True)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride=1, kernel=3):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)
        self.norm = _norm(out_ch)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


def encoder_widths(base_width, n_down):
    # stem width, then one width per downsampling, capped at 4x base
    widths = [base_width]
    for i in range(n_down):
        widths.append(min(base_width * 2 ** (i + 1), base_width * 4))
    return widths


class Encoder(nn.Module):
    """Strided conv stack emitting a latent feature map plus skip features.

    The latent map splits channel-wise into a common (anatomy) part and a
    unique (lesion) part; the unique part is pooled to a vector code.
    """

    def __init__(self, base_width, n_down, latent_channels, unique_channels):
        super().__init__()
        self.n_down = n_down
        self.latent_channels = latent_channels
        self.unique_channels = unique_channels
        self.common_channels = latent_channels - unique_channels
        widths = encoder_widths(base_width, n_down)
        self.stem = ConvBlock(1, widths[0])
        downs = []
        for i in range(n_down):
            downs.append(
                nn.Sequential(
                    nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1),
                    _norm(widths[i + 1]),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
        self.downs = nn.ModuleList(downs)
        self.bottleneck = ConvBlock(widths[-1], latent_channels)
        self.skip_channels = widths[:-1]

    def forward(self, x):
        if x.shape[-1] % (2**self.n_down) or x.shape[-2] % (2**self.n_down):
            raise ValueError(
                f"input size {tuple(x.shape[-2:])} not divisible by {2 ** self.n_down}"
            )
        h = self.stem(x)
        skips = [h]
        for down in self.downs:
            h = down(h)
            skips.append(h)
        latent = self.bottleneck(h)
        return latent, skips[:-1]

    def split(self, latent):
        common = latent[:, : self.common_channels]
        unique = latent[:, self.common_channels :].mean(dim=(2, 3))
        return common, unique


class AttentionGate(nn.Module):
    """Additive attention over a skip connection; emits the coefficient map."""

    def __init__(self, skip_ch, gate_ch):
        super().__init__()
        inter = max(skip_ch // 2, 4)
        self.project_skip = nn.Conv2d(skip_ch, inter, 1, bias=False)
        self.project_gate = nn.Conv2d(gate_ch, inter, 1, bias=True)
        self.score = nn.Conv2d(inter, 1, 1, bias=True)

    def forward(self, skip, gate):
        if skip.shape[-2:] != gate.shape[-2:]:
            raise ValueError("skip and gating signal must be spatially aligned")
        a = torch.sigmoid(self.score(F.relu(self.project_skip(skip) + self.project_gate(gate))))
        return self.apply_gate(skip, a), a

    @staticmethod
    def apply_gate(skip, alpha):
        return skip * alpha


class PassGate(nn.Module):
    """Ungated skip (attention disabled); coefficient map is all ones."""

    def forward(self, skip, gate):
        return skip, torch.ones_like(skip[:, :1])

    @staticmethod
    def apply_gate(skip, alpha):
        return skip * alpha


class Decoder(nn.Module):
    """Mirror of the encoder: nearest-neighbor upsampling with gated skips."""

    def __init__(self, in_ch, base_width, n_down, out_activation="sigmoid", gated=True):
        super().__init__()
        widths = encoder_widths(base_width, n_down)
        self.n_down = n_down
        self.entry = ConvBlock(in_ch, widths[-1])
        gates, blocks = [], []
        cur = widths[-1]
        for i in reversed(range(n_down)):
            skip_ch = widths[i]
            gates.append(AttentionGate(skip_ch, cur) if gated else PassGate())
            blocks.append(ConvBlock(cur + skip_ch, skip_ch))
            cur = skip_ch
        self.gates = nn.ModuleList(gates)
        self.blocks = nn.ModuleList(blocks)
        self.out_conv = nn.Conv2d(cur, 1, 3, padding=1)
        self.out_activation = out_activation

    def forward(self, z, skips, return_attention=False):
        h = self.entry(z)
        alphas = []
        for gate, block, skip in zip(self.gates, self.blocks, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            gated, alpha = gate(skip, h)
            alphas.append(alpha)
            h = block(torch.cat([h, gated], dim=1))
        out = self.out_conv(h)
        if self.out_activation == "sigmoid":
            out = torch.sigmoid(out)
        elif self.out_activation == "tanh":
            out = torch.tanh(out)
        if return_attention:
            return out, alphas
        return out


class ResSegDecoder(nn.Module):
    """Residual decoder with a piggybacked segmentation path.

    Both paths run the same convolutions (including the 1-channel output
    conv); each path has its own instance-norm parameters, and the
    segmenting path adds one private classifying layer on top. Everything
    else is shared, which the parameter inventory methods expose.
    """

    def __init__(self, in_ch, base_width, n_down, gated=True):
        super().__init__()
        widths = encoder_widths(base_width, n_down)
        self.n_down = n_down
        self.entry_conv = nn.Conv2d(in_ch, widths[-1], 3, padding=1)
        gates, blocks = [], []
        res_norms, seg_norms = [_norm(widths[-1])], [_norm(widths[-1])]
        cur = widths[-1]
        for i in reversed(range(n_down)):
            skip_ch = widths[i]
            gates.append(AttentionGate(skip_ch, cur) if gated else PassGate())
            blocks.append(nn.Conv2d(cur + skip_ch, skip_ch, 3, padding=1))
            res_norms.append(_norm(skip_ch))
            seg_norms.append(_norm(skip_ch))
            cur = skip_ch
        self.gates = nn.ModuleList(gates)
        self.blocks = nn.ModuleList(blocks)
        self.res_norms = nn.ModuleList(res_norms)
        self.seg_norms = nn.ModuleList(seg_norms)
        self.out_conv = nn.Conv2d(cur, 1, 3, padding=1)
        # The classifying layer reads the pre-activation residual map, whose
        # magnitude localizes the lesion; start it as a sharpened identity so
        # segmentation begins correlated with the residual.
        self.classifier = nn.Conv2d(1, 1, 3, padding=1)
        self.classifier.keep_init = True
        with torch.no_grad():
            nn.init.zeros_(self.classifier.weight)
            self.classifier.weight[0, 0, 1, 1] = 4.0
            self.classifier.bias.fill_(-1.0)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def _trunk(self, z, skips, norms, collect_attention=False):
        h = self.act(norms[0](self.entry_conv(z)))
        alphas = []
        for k, (gate, block, skip) in enumerate(zip(self.gates, self.blocks, reversed(skips))):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            gated, alpha = gate(skip, h)
            alphas.append(alpha)
            h = self.act(norms[k + 1](block(torch.cat([h, gated], dim=1))))
        return self.out_conv(h), alphas

    def forward(self, z, skips, mode="res", return_attention=False):
        if mode == "res":
            raw, alphas = self._trunk(z, skips, self.res_norms, return_attention)
            out = torch.tanh(raw)
        elif mode == "seg":
            raw, alphas = self._trunk(z, skips, self.seg_norms, return_attention)
            # classify the magnitude of the residual-style map: lesions may be
            # hyper- or hypo-intense depending on modality, the deviation from
            # the healthy reconstruction localizes them either way
            out = self.classifier(raw.abs())  # logits; caller applies sigmoid
        else:
            raise ValueError(f"unknown decoder mode {mode!r}")
        if return_attention:
            return out, alphas
        return out

    # --- parameter inventory -------------------------------------------------
    def _named(self, prefixes, include=True):
        for name, p in self.named_parameters():
            hit = any(name.startswith(pref) for pref in prefixes)
            if hit == include:
                yield name, p

    def shared_parameters(self):
        return dict(self._named(("res_norms.", "seg_norms.", "classifier."), include=False))

    def res_private_parameters(self):
        return dict(self._named(("res_norms.",)))

    def seg_private_parameters(self):
        return dict(self._named(("seg_norms.", "classifier.")))

    def res_parameters(self):
        out = self.shared_parameters()
        out.update(self.res_private_parameters())
        return out

    def seg_parameters(self):
        out = self.shared_parameters()
        out.update(self.seg_private_parameters())
        return out


def _disc_trunk(base_width):
    # no normalization: absolute intensity and polarity are realism cues here
    w = base_width
    trunk = nn.Sequential(
        nn.Conv2d(1, w, 4, stride=2, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
    )
    for m in trunk:
        if isinstance(m, nn.Conv2d):
            # without norm layers the 0.02-std init collapses activations
            nn.init.kaiming_normal_(m.weight, a=0.2, nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)
            m.keep_init = True
    return trunk


class PatchDiscriminator(nn.Module):
    """Patch-level realism scores (unbounded real map)."""

    def __init__(self, base_width=16):
        super().__init__()
        self.trunk = _disc_trunk(base_width)
        self.head = nn.Conv2d(4 * base_width, 1, 3, padding=1)

    def forward(self, x):
        return self.head(self.trunk(x))


class DualHeadDiscriminator(nn.Module):
    """Shared trunk with separate absence/presence realism heads."""

    def __init__(self, base_width=16):
        super().__init__()
        self.trunk = _disc_trunk(base_width)
        self.head_a = nn.Conv2d(4 * base_width, 1, 3, padding=1)
        self.head_p = nn.Conv2d(4 * base_width, 1, 3, padding=1)

    def forward(self, x, domain):
        h = self.trunk(x)
        if domain == "A":
            return self.head_a(h)
        if domain == "P":
            return self.head_p(h)
        raise ValueError(f"unknown domain {domain!r}")
