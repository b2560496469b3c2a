"""Generator and discriminators of the attention-guided translation GAN."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm as _sn

from .ops import adalin, cam_attention

PRESETS = {
    # image_size: 32-64 px desk runs
    "light": {"ngf": 16, "ndf": 16, "n_res": 2, "global_layers": 5, "local_layers": 4},
    # 256 px, full width
    "paper": {"ngf": 64, "ndf": 64, "n_res": 4, "global_layers": 7, "local_layers": 5},
}


class ResnetBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3, bias=False), nn.InstanceNorm2d(dim), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3, bias=False), nn.InstanceNorm2d(dim))

    def forward(self, x):
        return x + self.block(x)


class AdaLIN(nn.Module):
    """Style-conditioned mix of instance and layer norm; rho starts at 0.9."""

    def __init__(self, dim):
        super().__init__()
        self.rho = nn.Parameter(torch.full((1, dim, 1, 1), 0.9))

    def forward(self, x, gamma, beta):
        return adalin(x, gamma, beta, self.rho)


class ILN(nn.Module):
    """Layer-instance norm with learned affine; rho starts at 0."""

    def __init__(self, dim):
        super().__init__()
        self.rho = nn.Parameter(torch.zeros(1, dim, 1, 1))
        self.gamma = nn.Parameter(torch.ones(1, dim, 1, 1))
        self.beta = nn.Parameter(torch.zeros(1, dim, 1, 1))

    def forward(self, x):
        return adalin(x, self.gamma, self.beta, self.rho)


class ResnetAdaLINBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.pad1 = nn.ReflectionPad2d(1)
        self.conv1 = nn.Conv2d(dim, dim, 3, bias=False)
        self.norm1 = AdaLIN(dim)
        self.pad2 = nn.ReflectionPad2d(1)
        self.conv2 = nn.Conv2d(dim, dim, 3, bias=False)
        self.norm2 = AdaLIN(dim)

    def forward(self, x, gamma, beta):
        out = F.relu(self.norm1(self.conv1(self.pad1(x)), gamma, beta))
        out = self.norm2(self.conv2(self.pad2(out)), gamma, beta)
        return out + x


class Generator(nn.Module):
    """Encoder, CAM attention, AdaLIN residual decoder.  Returns (image, cam_logit, heatmap)."""

    def __init__(self, in_ch=3, out_ch=3, ngf=64, n_res=4, n_down=2):
        super().__init__()
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_ch, ngf, 7, bias=False), nn.InstanceNorm2d(ngf), nn.ReLU(True)]
        for i in range(n_down):
            m = 2 ** i
            layers += [nn.ReflectionPad2d(1), nn.Conv2d(ngf * m, ngf * m * 2, 3, stride=2, bias=False),
                       nn.InstanceNorm2d(ngf * m * 2), nn.ReLU(True)]
        mult = 2 ** n_down
        dim = ngf * mult
        layers += [ResnetBlock(dim) for _ in range(n_res)]
        self.down = nn.Sequential(*layers)
        self.gap_fc = nn.Linear(dim, 1, bias=False)
        self.gmp_fc = nn.Linear(dim, 1, bias=False)
        self.conv1x1 = nn.Conv2d(dim * 2, dim, 1)
        # light variant: gamma/beta from globally pooled features
        self.fc = nn.Sequential(nn.Linear(dim, dim, bias=False), nn.ReLU(True),
                                nn.Linear(dim, dim, bias=False), nn.ReLU(True))
        self.gamma = nn.Linear(dim, dim, bias=False)
        self.beta = nn.Linear(dim, dim, bias=False)
        self.up_blocks = nn.ModuleList(ResnetAdaLINBlock(dim) for _ in range(n_res))
        up = []
        for i in range(n_down):
            m = 2 ** (n_down - i)
            up += [nn.Upsample(scale_factor=2, mode="nearest"), nn.ReflectionPad2d(1),
                   nn.Conv2d(ngf * m, ngf * m // 2, 3, bias=False), ILN(ngf * m // 2), nn.ReLU(True)]
        up += [nn.ReflectionPad2d(3), nn.Conv2d(ngf, out_ch, 7, bias=False), nn.Tanh()]
        self.up = nn.Sequential(*up)

    def forward(self, x):
        x = self.down(x)
        gap = cam_attention(x, self.gap_fc.weight, pool="avg")
        gmp = cam_attention(x, self.gmp_fc.weight, pool="max")
        cam_logit = torch.stack([gap.logit, gmp.logit], dim=1)
        x = F.relu(self.conv1x1(torch.cat([gap.weighted_features, gmp.weighted_features], dim=1)))
        heatmap = x.sum(dim=1, keepdim=True)
        h = self.fc(x.mean(dim=(2, 3)))
        gamma, beta = self.gamma(h), self.beta(h)
        for block in self.up_blocks:
            x = block(x, gamma, beta)
        return self.up(x), cam_logit, heatmap


class Discriminator(nn.Module):
    """PatchGAN with CAM.  Returns (patch_logits, cam_logit, heatmap)."""

    def __init__(self, in_ch=3, ndf=64, n_layers=5, spectral_norm=True):
        super().__init__()
        sn = _sn if spectral_norm else (lambda m: m)
        layers = [nn.ReflectionPad2d(1), sn(nn.Conv2d(in_ch, ndf, 4, stride=2)), nn.LeakyReLU(0.2, True)]
        for i in range(1, n_layers - 2):
            m = 2 ** (i - 1)
            layers += [nn.ReflectionPad2d(1), sn(nn.Conv2d(ndf * m, ndf * m * 2, 4, stride=2)),
                       nn.LeakyReLU(0.2, True)]
        m = 2 ** (n_layers - 3)
        layers += [nn.ReflectionPad2d(1), sn(nn.Conv2d(ndf * m, ndf * m * 2, 4, stride=1)), nn.LeakyReLU(0.2, True)]
        dim = ndf * m * 2
        self.model = nn.Sequential(*layers)
        self.gap_fc = sn(nn.Linear(dim, 1, bias=False))
        self.gmp_fc = sn(nn.Linear(dim, 1, bias=False))
        self.conv1x1 = nn.Conv2d(dim * 2, dim, 1)
        self.pad = nn.ReflectionPad2d(1)
        self.conv = sn(nn.Conv2d(dim, 1, 4, bias=False))

    def forward(self, x):
        x = self.model(x)
        gap = cam_attention(x, self.gap_fc.weight, pool="avg")
        gmp = cam_attention(x, self.gmp_fc.weight, pool="max")
        cam_logit = torch.stack([gap.logit, gmp.logit], dim=1)
        x = F.leaky_relu(self.conv1x1(torch.cat([gap.weighted_features, gmp.weighted_features], dim=1)), 0.2)
        heatmap = x.sum(dim=1, keepdim=True)
        return self.conv(self.pad(x)), cam_logit, heatmap


def clamp_rho(*modules) -> None:
    with torch.no_grad():
        for net in modules:
            for m in net.modules():
                if isinstance(m, (AdaLIN, ILN)):
                    m.rho.clamp_(0.0, 1.0)


def rho_values(*modules) -> torch.Tensor:
    vals = [m.rho.detach().reshape(-1) for net in modules for m in net.modules() if isinstance(m, (AdaLIN, ILN))]
    return torch.cat(vals) if vals else torch.zeros(0)

