"""Classifiers, the split-able conditional generator, and their training loops."""

import logging
import math
from typing import Callable, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Checkpoint, GradientSet, ImageBatch, derive_seed, seeded_rng, torch_generator

log = logging.getLogger(__name__)

ARCHITECTURES = ("linear", "mlp2", "convnet4")


class TrainingDivergedError(RuntimeError):
    pass


def _seeded_init(seed: int, build: Callable[[], nn.Module]) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % (2**63))
        return build()


# ---------------------------------------------------------------------------
# classifiers


class Classifier(nn.Module):
    """Image classifier whose last leaf group is the fully-connected head ``fc``.

    The representation fed to ``fc`` is always non-negative (ReLU output, or raw
    pixels for the linear model), which the single-sample label extraction relies on.
    """

    fc_layer = "fc.weight"

    def __init__(self, architecture_id: str, num_classes: int, input_shape: Sequence[int], width: int = 16):
        super().__init__()
        if architecture_id not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {architecture_id!r}; choose from {ARCHITECTURES}")
        self.architecture_id = architecture_id
        self.num_classes = int(num_classes)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.width = int(width)
        c, h, w = self.input_shape
        if architecture_id == "linear":
            self.body = nn.Flatten()
            feat = c * h * w
        elif architecture_id == "mlp2":
            hidden = 8 * width
            self.body = nn.Sequential(
                nn.Flatten(),
                nn.Linear(c * h * w, hidden), nn.ReLU(),
                nn.Linear(hidden, hidden), nn.ReLU(),
            )
            feat = hidden
        else:
            self.body = nn.Sequential(
                nn.Conv2d(c, width, 3, padding=1), nn.ReLU(),
                nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1), nn.ReLU(),
                nn.Flatten(),
            )
            feat = 4 * width * math.ceil(h / 8) * math.ceil(w / 8)
        self.feature_dim = feat
        self.fc = nn.Linear(feat, self.num_classes)

    def representation(self, x: torch.Tensor) -> torch.Tensor:
        self._check_shape(x)
        return self.body(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.representation(x))

    def _check_shape(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected input shape [B, {', '.join(map(str, self.input_shape))}], got {list(x.shape)}")

    def metadata(self):
        return {
            "kind": "classifier",
            "architecture-id": self.architecture_id,
            "num-classes": str(self.num_classes),
            "input-shape": ",".join(map(str, self.input_shape)),
            "width": str(self.width),
        }


def make_classifier(architecture_id: str, num_classes: int, input_shape, seed: int, width: int = 16) -> Classifier:
    return _seeded_init(derive_seed(seed, "classifier-init"),
                        lambda: Classifier(architecture_id, num_classes, input_shape, width))


def classifier_forward(model: Classifier, images) -> torch.Tensor:
    x = images.pixels if isinstance(images, ImageBatch) else images
    return model(x)


def loss_and_gradients(model: nn.Module, images, labels, create_graph: bool = False) -> Tuple[torch.Tensor, GradientSet]:
    """Mean cross-entropy over the batch and its gradient for every parameter leaf."""
    x = images.pixels if isinstance(images, ImageBatch) else images
    labels = torch.as_tensor(labels, dtype=torch.long)
    num_classes = getattr(model, "num_classes", None)
    if labels.shape != (x.shape[0],):
        raise ValueError(f"expected {x.shape[0]} labels, got shape {tuple(labels.shape)}")
    if num_classes is not None and ((labels < 0).any() or (labels >= num_classes).any()):
        raise ValueError(f"labels must lie in [0, {num_classes}), got {labels.tolist()}")
    names, params = zip(*[(n, p) for n, p in model.named_parameters()])
    loss = F.cross_entropy(model(x), labels)
    grads = torch.autograd.grad(loss, params, create_graph=create_graph)
    if not create_graph:
        grads = [g.detach() for g in grads]
    return loss, dict(zip(names, grads))


def input_gradient(fn: Callable[[torch.Tensor], torch.Tensor], at: torch.Tensor) -> torch.Tensor:
    x = at.detach().clone().requires_grad_(True)
    out = fn(x)
    if out.numel() != 1:
        raise ValueError(f"loss functional must return a scalar, got shape {tuple(out.shape)}")
    (g,) = torch.autograd.grad(out.reshape(()), x)
    return g


def checkpoint_from_model(model: nn.Module, extra_meta=None) -> Checkpoint:
    meta = dict(model.metadata()) if hasattr(model, "metadata") else {}
    meta.update(extra_meta or {})
    tensors = {k: v.detach().clone() for k, v in model.state_dict().items()
               if v.is_floating_point()}
    return Checkpoint(tensors=tensors, metadata=meta)


def classifier_from_checkpoint(ckpt: Checkpoint) -> Classifier:
    m = ckpt.metadata
    model = Classifier(m["architecture-id"], int(m["num-classes"]),
                       [int(s) for s in m["input-shape"].split(",")], int(m.get("width", 16)))
    model.load_state_dict({k: v.clone() for k, v in ckpt.tensors.items()})
    return model


def set_flat_params(model: nn.Module, tensors) -> nn.Module:
    with torch.no_grad():
        for (name, p) in model.named_parameters():
            p.copy_(tensors[name])
    return model


# ---------------------------------------------------------------------------
# generator


class _Stem(nn.Module):
    """G_0: latent (+ class embedding) to a [4*base, 4, 4] feature map."""

    def __init__(self, latent_dim, num_classes, base, embed_dim, start):
        super().__init__()
        self.conditional = num_classes > 0
        self.embed = nn.Embedding(num_classes, embed_dim) if self.conditional else None
        in_dim = latent_dim + (embed_dim if self.conditional else 0)
        self.start = start
        self.base = base
        self.proj = nn.Linear(in_dim, 4 * base * start * start)
        self.norm = nn.BatchNorm2d(4 * base)

    def forward(self, z, labels=None):
        if self.conditional:
            if labels is None:
                raise ValueError("conditional generator needs class labels")
            z = torch.cat([z, self.embed(torch.as_tensor(labels, dtype=torch.long))], dim=1)
        h = self.proj(z).view(z.shape[0], 4 * self.base, self.start, self.start)
        return self.norm(h)


class _UpBlock(nn.Module):
    def __init__(self, cin, cout, last=False):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm = None if last else nn.BatchNorm2d(cout)
        self.last = last

    def forward(self, h, labels=None):
        h = F.interpolate(F.relu(h), scale_factor=2, mode="nearest")
        h = self.conv(h)
        return torch.sigmoid(h) if self.last else self.norm(h)


class GeneratorStack(nn.Module):
    """Conditional generator G_0 o G_1 o ... o G_N with one upsampling stage per block.

    ``head(z, i)`` evaluates G_0..G_{i-1}; ``tail(h, i)`` evaluates G_i..G_N.  For
    every i, ``tail(head(z, i), i)`` runs exactly the ops of ``forward(z)``.
    Attacks use the stack in eval mode (frozen batch-norm statistics).
    """

    def __init__(self, latent_dim=32, num_classes=10, out_channels=3, img_size=32, base=32, embed_dim=16):
        super().__init__()
        n_up = int(round(math.log2(img_size / 4)))
        if 4 * 2**n_up != img_size:
            raise ValueError(f"img_size must be 4 * 2**n, got {img_size}")
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        self.conditional = num_classes > 0
        self.out_channels = out_channels
        self.img_size = img_size
        self.base = base
        self.embed_dim = embed_dim
        chans = [4 * base]
        for i in range(n_up - 1):
            chans.append(max(chans[-1] // 2, 8))
        blocks = [_Stem(latent_dim, num_classes, base, embed_dim, 4)]
        for i in range(n_up - 1):
            blocks.append(_UpBlock(chans[i], chans[i + 1]))
        blocks.append(_UpBlock(chans[-1], out_channels, last=True))
        self.blocks = nn.ModuleList(blocks)

    @property
    def depth(self) -> int:
        """N, the index of the last block."""
        return len(self.blocks) - 1

    def feature_shape(self, i: int):
        """Shape (without batch dim) of the input to block i."""
        if i == 0:
            return (self.latent_dim,)
        with torch.no_grad():
            was = self.training
            self.eval()
            labels = torch.zeros(1, dtype=torch.long) if self.conditional else None
            h = self.head(torch.zeros(1, self.latent_dim), i, labels)
            self.train(was)
        return tuple(h.shape[1:])

    def head(self, z, i: int, labels=None):
        if not 0 <= i <= len(self.blocks):
            raise IndexError(f"split index {i} outside [0, {len(self.blocks)}]")
        h = z
        for block in self.blocks[:i]:
            h = block(h, labels)
        return h

    def tail(self, h, i: int, labels=None):
        if not 0 <= i <= self.depth:
            raise IndexError(f"layer index {i} outside [0, {self.depth}]")
        for block in self.blocks[i:]:
            h = block(h, labels)
        return h

    def block(self, h, i: int, labels=None):
        return self.blocks[i](h, labels)

    def forward(self, z, labels=None):
        return self.tail(z, 0, labels)

    def metadata(self):
        return {
            "kind": "generator",
            "latent-dim": str(self.latent_dim),
            "num-classes": str(self.num_classes),
            "input-shape": f"{self.out_channels},{self.img_size},{self.img_size}",
            "blocks": str(len(self.blocks)),
            "base": str(self.base),
            "embed-dim": str(self.embed_dim),
        }


def make_generator(seed: int, **kwargs) -> GeneratorStack:
    return _seeded_init(derive_seed(seed, "generator-init"), lambda: GeneratorStack(**kwargs))


def generator_from_checkpoint(ckpt: Checkpoint) -> GeneratorStack:
    m = ckpt.metadata
    c, s, _ = (int(v) for v in m["input-shape"].split(","))
    gen = GeneratorStack(latent_dim=int(m["latent-dim"]), num_classes=int(m["num-classes"]),
                         out_channels=c, img_size=s, base=int(m["base"]), embed_dim=int(m["embed-dim"]))
    state = gen.state_dict()
    for k, v in ckpt.tensors.items():
        state[k] = v.clone()
    gen.load_state_dict(state)
    gen.eval()
    return gen


def generator_tail_forward(gen: GeneratorStack, start_layer: int, features: torch.Tensor, labels=None) -> ImageBatch:
    if not 0 <= start_layer <= gen.depth:
        raise IndexError(f"layer index {start_layer} outside [0, {gen.depth}]")
    return ImageBatch(gen.tail(features, start_layer, labels))


class _Discriminator(nn.Module):
    """Projection discriminator used only for generator training."""

    def __init__(self, in_channels, num_classes, base=32, img_size=32):
        super().__init__()
        sn = nn.utils.spectral_norm
        self.net = nn.Sequential(
            sn(nn.Conv2d(in_channels, base, 4, 2, 1)), nn.LeakyReLU(0.1),
            sn(nn.Conv2d(base, 2 * base, 4, 2, 1)), nn.LeakyReLU(0.1),
            sn(nn.Conv2d(2 * base, 4 * base, 4, 2, 1)), nn.LeakyReLU(0.1),
            nn.Flatten(),
        )
        feat = 4 * base * (img_size // 8) ** 2
        self.out = sn(nn.Linear(feat, 1))
        self.embed = sn(nn.Embedding(num_classes, feat)) if num_classes > 0 else None

    def forward(self, x, labels=None):
        h = self.net(x)
        o = self.out(h).squeeze(1)
        if self.embed is not None:
            o = o + (self.embed(labels) * h).sum(1)
        return o


def train_generator(dataset, seed: int, epochs: int = 10, batch_size: int = 64, lr: float = 2e-4, betas=(0.0, 0.9),
                    latent_dim: int = 32, base: int = 32, embed_dim: int = 16, disc_base: int = 32, max_steps: Optional[int] = None,
                    log_every: int = 200, history: Optional[list] = None) -> GeneratorStack:
    """Adversarial training of a conditional GeneratorStack (hinge loss, spectral-norm critic).

    Returns the generator in eval mode.  A NaN loss aborts with TrainingDivergedError.
    """
    c, h, w = dataset.images.shape[1:]
    num_classes = int(dataset.labels.max().item()) + 1
    gen = make_generator(seed, latent_dim=latent_dim, num_classes=num_classes, out_channels=c,
                         img_size=h, base=base, embed_dim=embed_dim)
    disc = _seeded_init(derive_seed(seed, "disc-init"), lambda: _Discriminator(c, num_classes, disc_base, h))
    opt_g = torch.optim.Adam(gen.parameters(), lr=lr, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=lr, betas=betas)
    rng = seeded_rng(derive_seed(seed, "gen-batches"))
    tg = torch_generator(derive_seed(seed, "gen-latents"))
    n = len(dataset)
    step = 0
    gen.train()
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            if max_steps is not None and step >= max_steps:
                break
            idx = torch.from_numpy(order[start:start + batch_size])
            real, y = dataset.images[idx], dataset.labels[idx]
            z = torch.randn(batch_size, latent_dim, generator=tg)
            fake = gen(z, y)
            d_loss = F.relu(1 - disc(real, y)).mean() + F.relu(1 + disc(fake.detach(), y)).mean()
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            g_loss = -disc(fake, y).mean()
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            if not (math.isfinite(d_loss.item()) and math.isfinite(g_loss.item())):
                raise TrainingDivergedError(f"generator training diverged at step {step}: d={d_loss.item()} g={g_loss.item()}")
            if history is not None:
                history.append((epoch, step, d_loss.item(), g_loss.item()))
            if log_every and step % log_every == 0:
                log.info("gen step %d epoch %d d_loss %.4f g_loss %.4f", step, epoch, d_loss.item(), g_loss.item())
            step += 1
    gen.eval()
    return gen


def sample_generator(gen: GeneratorStack, labels, seed: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    z = torch.randn(len(labels), gen.latent_dim, generator=torch_generator(seed))
    with torch.no_grad():
        return gen(z, labels)


def accuracy(model: nn.Module, dataset, batch_size: int = 512) -> float:
    correct = 0
    with torch.no_grad():
        for s in range(0, len(dataset), batch_size):
            logits = model(dataset.images[s:s + batch_size])
            correct += (logits.argmax(1) == dataset.labels[s:s + batch_size]).sum().item()
    return correct / max(len(dataset), 1)


def train_classifier(dataset, seed: int, architecture_id: str = "convnet4", epochs: int = 5, batch_size: int = 64,
                     lr: float = 0.05, momentum: float = 0.9, width: int = 16, num_classes: Optional[int] = None,
                     val_dataset=None, model: Optional[Classifier] = None, history: Optional[list] = None) -> Classifier:
    """Minibatch SGD on cross-entropy.  ``epochs=0`` returns the seeded initialisation."""
    if num_classes is None:
        num_classes = int(dataset.labels.max().item()) + 1
    if model is None:
        model = make_classifier(architecture_id, num_classes, tuple(dataset.images.shape[1:]), seed, width)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)
    rng = seeded_rng(derive_seed(seed, "classifier-batches"))
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start:start + batch_size])
            loss = F.cross_entropy(model(dataset.images[idx]), dataset.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"classifier training diverged in epoch {epoch}")
            total += loss.item() * len(idx)
        train_acc = accuracy(model, dataset)
        val_acc = accuracy(model, val_dataset) if val_dataset is not None else float("nan")
        log.info("classifier epoch %d loss %.4f train_acc %.4f val_acc %.4f", epoch, total / n, train_acc, val_acc)
        if history is not None:
            history.append((epoch, total / n, train_acc, val_acc))
    return model
