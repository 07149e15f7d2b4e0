"""Regenerate resnet_tiny.safetensors / resnet_tiny.json with PyTorch.

A bottleneck residual network in torchvision's layout and naming, with tiny
widths and randomized batch-norm statistics, evaluated on a fixed image.
"""
import json
import pathlib

import torch
from safetensors.torch import save_file
from torch import nn
from torchvision.models.resnet import Bottleneck

STEM, WIDTHS, BLOCKS, SIZE = 4, [2, 3], [1, 2], 32


class TinyResNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(3, STEM, 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(STEM)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        inplanes = STEM
        for i, (w, n) in enumerate(zip(WIDTHS, BLOCKS)):
            stride = 1 if i == 0 else 2
            layers = []
            for b in range(n):
                s = stride if b == 0 else 1
                down = None
                if s != 1 or inplanes != w * 4:
                    down = nn.Sequential(nn.Conv2d(inplanes, w * 4, 1, s, bias=False), nn.BatchNorm2d(w * 4))
                layers.append(Bottleneck(inplanes, w, s, down))
                inplanes = w * 4
            setattr(self, f"layer{i + 1}", nn.Sequential(*layers))

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        for i in range(len(WIDTHS)):
            x = getattr(self, f"layer{i + 1}")(x)
        return x


torch.manual_seed(0)
net = TinyResNet().double()
for m in net.modules():
    if isinstance(m, nn.BatchNorm2d):
        m.weight.data.uniform_(0.5, 1.5)
        m.bias.data.uniform_(-0.2, 0.2)
        m.running_mean.uniform_(-0.2, 0.2)
        m.running_var.uniform_(0.5, 2.0)
net.eval()

img = torch.rand(SIZE, SIZE, 3).double()  # f32-representable pixels
mean = torch.tensor([0.485, 0.456, 0.406], dtype=torch.float64)
std = torch.tensor([0.229, 0.224, 0.225], dtype=torch.float64)
x = ((img - mean) / std).permute(2, 0, 1).unsqueeze(0)
out = pathlib.Path(__file__).parent
tensors = {k: v.float().contiguous() for k, v in net.state_dict().items() if "num_batches" not in k}
# cast to f32 and back so both sides see identical weights
net.load_state_dict({k: v.double() for k, v in tensors.items()}, strict=False)
with torch.no_grad():
    y = net(x)[0].permute(1, 2, 0)  # H, W, C
save_file(tensors, out / "resnet_tiny.safetensors")
json.dump(
    {
        "stem": STEM,
        "widths": WIDTHS,
        "blocks": BLOCKS,
        "input_size": SIZE,
        "image_hwc": img.flatten().tolist(),
        "features_hwc": y.flatten().tolist(),
        "grid": [y.shape[0] * y.shape[1], y.shape[2]],
    },
    open(out / "resnet_tiny.json", "w"),
)
