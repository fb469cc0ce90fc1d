"""The alignment and planning losses at known points, and a finite-difference look at one gradient."""
import math

import torch

from procplan.decoder import sd_loss
from procplan.mim import vlc_loss, vlm_loss_from_logits

torch.set_default_dtype(torch.float64)

# identical embeddings: every similarity is equal, so the contrastive loss is ln B
for b in (2, 4, 8):
    x = torch.ones(b, 6)
    print(f"VLC, B={b}: {vlc_loss(x, x).item():.6f}  (ln B = {math.log(b):.6f})")

# the B=2 hand example at temperature 1
xv = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
print("VLC hand example:", round(vlc_loss(xv, xv, temperature=1.0).item(), 5), "= log(1 + 1/e) =",
      round(math.log1p(math.exp(-1)), 5))

print("VLM at zero logits:", vlm_loss_from_logits(torch.zeros(3, 3)).item(), " ln 2 =", math.log(2))
print("SD at uniform logits, N=30:", sd_loss(torch.zeros(4, 3, 30), torch.zeros(4, 3, dtype=torch.long)).item(),
      " ln 30 =", math.log(30))

# central differences against autograd for the contrastive loss
xv = torch.randn(4, 6, requires_grad=True)
xq = torch.randn(4, 6)
(grad,) = torch.autograd.grad(vlc_loss(xv, xq), xv)
numeric = torch.zeros_like(xv)
h = 1e-5
with torch.no_grad():
    for i in range(xv.numel()):
        flat = xv.view(-1)
        orig = flat[i].item()
        flat[i] = orig + h
        plus = vlc_loss(xv, xq).item()
        flat[i] = orig - h
        minus = vlc_loss(xv, xq).item()
        flat[i] = orig
        numeric.view(-1)[i] = (plus - minus) / (2 * h)
print("relative gradient error:", ((grad - numeric).norm() / grad.norm()).item())
