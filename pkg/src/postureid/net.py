"""Compact convolutional regressor: five conv/ReLU/maxpool blocks and a
linear head, trained with stochastic gradient descent with momentum on a mean
squared error loss.

Layers run on torch (CPU); initialization, the optimizer update
(v <- mu*v - lr*g; w <- w + v), batching, checkpointing and the normalization
bookkeeping live here so that runs are reproducible from a single seed.  A
float64 mode exists solely for finite-difference gradient checks.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from . import serialize
from .dataset import TargetStats, compute_target_stats, destandardize_targets
from .dec import Controlled, ModuleParams
from .features import FeatureImage, ImageStats

CHECKPOINT_MAGIC = b"PCNN"
CHECKPOINT_VERSION = 1

DEFAULT_WIDTHS = (16, 32, 64, 128, 128)


@dataclass(frozen=True)
class ArchSpec:
    """Input dims, block widths and output dimension of the network."""

    in_channels: int = 3
    out_dim: int = 5
    height: int = 51
    width: int = 51
    widths: tuple = DEFAULT_WIDTHS

    def spatial_chain(self):
        """Spatial size after each pool (ceil division by 2)."""
        sizes = []
        h = self.height
        for _ in self.widths:
            h = -(-h // 2)
            sizes.append(h)
        return tuple(sizes)

    @property
    def flat_dim(self):
        s = self.spatial_chain()[-1]
        return s * s * self.widths[-1]

    def parameter_count(self):
        total = 0
        c = self.in_channels
        for w in self.widths:
            total += w * c * 9 + w
            c = w
        total += self.flat_dim * self.out_dim + self.out_dim
        return total


class _Torso(torch.nn.Module):
    def __init__(self, spec):
        super().__init__()
        blocks = []
        c = spec.in_channels
        for w in spec.widths:
            blocks += [torch.nn.Conv2d(c, w, 3, padding=1),
                       torch.nn.ReLU(),
                       torch.nn.MaxPool2d(2, 2, ceil_mode=True)]
            c = w
        self.features = torch.nn.Sequential(*blocks)
        self.head = torch.nn.Linear(spec.flat_dim, spec.out_dim)

    def forward(self, x):
        x = self.features(x)
        return self.head(torch.flatten(x, 1))


@dataclass
class TrainingSchedule:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 200
    lr_decay: float = 0.5
    lr_decay_every: int = 50

    def lr_at(self, epoch):
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class Network:
    """Model parameters plus everything needed to reproduce and apply them."""

    spec: ArchSpec
    module: _Torso = field(repr=False)
    seed: int = 0
    momenta: list = field(default_factory=list, repr=False)
    history: dict = field(default_factory=lambda: {"train": [], "val": []})
    image_stats: ImageStats = None
    target_stats: TargetStats = None

    def parameters(self):
        return list(self.module.parameters())

    def parameter_arrays(self):
        return [p.detach().numpy().astype(np.float32) for p in self.parameters()]


def init(spec, seed, scheme="he"):
    """Build a network with He fan-in init (zero biases), or all zeros.

    Deterministic: weights come from a numpy generator seeded with seed.
    """
    if spec.flat_dim <= 0 or spec.out_dim <= 0:
        raise ValueError("inconsistent architecture dimensions")
    module = _Torso(spec)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if scheme == "zeros":
                p.zero_()
            elif p.ndim > 1:
                fan_in = int(np.prod(p.shape[1:]))
                w = rng.standard_normal(tuple(p.shape)) * math.sqrt(2.0 / fan_in)
                p.copy_(torch.from_numpy(w.astype(np.float32)))
            else:
                p.zero_()
    net = Network(spec=spec, module=module, seed=seed)
    net.momenta = [torch.zeros_like(p) for p in net.parameters()]
    return net


def _to_torch(images, dtype=torch.float32):
    """(n, H, W, C) numpy -> (n, C, H, W) torch."""
    arr = np.ascontiguousarray(np.transpose(np.asarray(images), (0, 3, 1, 2)))
    return torch.from_numpy(arr).to(dtype)


def prepare_images(images, stats, dtype=torch.float32):
    """Normalize raw images with the training stats; float32 throughout so
    the training path and inference path share one arithmetic."""
    x = np.asarray(images, dtype=np.float32)
    m = stats.mean.astype(np.float32)
    v = stats.variance.astype(np.float32)
    return _to_torch((x - m) / v, dtype)


def forward_batch(net, images, dtype=torch.float32):
    """Prediction matrix for a batch of normalized images (n, H, W, C)."""
    x = images if isinstance(images, torch.Tensor) else _to_torch(images, dtype)
    if x.shape[1:] != (net.spec.in_channels, net.spec.height, net.spec.width):
        raise ValueError(f"image dims {tuple(x.shape[1:])} do not match the "
                         f"architecture")
    with torch.no_grad():
        return net.module(x).numpy()


def _image_array(image):
    return image.data if isinstance(image, FeatureImage) else np.asarray(image)


def forward(net, image):
    """Single-image forward pass (runs as a batch of one)."""
    return forward_batch(net, _image_array(image)[None])[0]


def loss_and_grads(net, images, targets):
    """Mean squared error over the batch and all output components, plus the
    gradients for every parameter (reverse accumulation)."""
    x = images if isinstance(images, torch.Tensor) else _to_torch(images)
    t = targets if isinstance(targets, torch.Tensor) else \
        torch.from_numpy(np.asarray(targets)).to(x.dtype)
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    net.module.zero_grad(set_to_none=False)
    loss = torch.nn.functional.mse_loss(net.module(x), t)
    loss.backward()
    grads = [p.grad.detach().clone() for p in net.parameters()]
    return float(loss.detach()), grads


def _epoch_loss(net, x, t, batch_size=256):
    total = 0.0
    n = x.shape[0]
    with torch.no_grad():
        for i in range(0, n, batch_size):
            xb, tb = x[i:i + batch_size], t[i:i + batch_size]
            err = net.module(xb) - tb
            total += float(torch.sum(err * err))
    return total / (n * t.shape[1])


def train(net, data, schedule=None, log=None):
    """SGD-with-momentum epoch loop with seeded shuffling.

    data supplies raw images, normalized targets and split codes (see
    RegressionData).  Targets are standardized with training-split stats;
    images are normalized element-wise with training-split stats.  Keeps the
    parameters of the best validation epoch.  Raises RuntimeError when the
    loss turns non-finite.
    """
    schedule = schedule or TrainingSchedule()
    net.image_stats = data.image_stats
    net.target_stats = data.target_stats

    train_mask = data.splits == 0
    val_mask = data.splits == 1
    x_train = prepare_images(data.images[train_mask], data.image_stats)
    x_val = prepare_images(data.images[val_mask], data.image_stats)
    t_train = torch.from_numpy(_standardize(data.targets[train_mask],
                                            data.target_stats))
    t_val = torch.from_numpy(_standardize(data.targets[val_mask],
                                          data.target_stats))

    rng = np.random.default_rng([net.seed, 1])
    params = net.parameters()
    best_val = math.inf
    best_params = [p.detach().clone() for p in params]
    n = x_train.shape[0]

    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n)
        running = 0.0
        seen = 0
        for i in range(0, n, schedule.batch_size):
            idx = torch.from_numpy(order[i:i + schedule.batch_size])
            mse, grads = loss_and_grads(net, x_train[idx], t_train[idx])
            if not math.isfinite(mse):
                raise RuntimeError(
                    f"training diverged at epoch {epoch} (non-finite loss); "
                    f"lower the learning rate")
            with torch.no_grad():
                for p, v, g in zip(params, net.momenta, grads):
                    v.mul_(schedule.momentum).add_(g, alpha=-lr)
                    p.add_(v)
            running += mse * len(idx)
            seen += len(idx)
        val = _epoch_loss(net, x_val, t_val) if x_val.shape[0] else math.nan
        net.history["train"].append(running / seen)
        net.history["val"].append(val)
        if x_val.shape[0] and val < best_val:
            best_val = val
            best_params = [p.detach().clone() for p in params]
        if log is not None:
            log(epoch, running / seen, val, lr)

    if x_val.shape[0]:
        with torch.no_grad():
            for p, b in zip(params, best_params):
                p.copy_(b)
    return net


def _standardize(targets, stats):
    t = np.asarray(targets, dtype=np.float64)
    return ((t - stats.mean) / stats.variance).astype(np.float32)


@dataclass
class RegressionData:
    """Raw images plus normalized targets, splits, and training-split stats."""

    images: np.ndarray
    targets: np.ndarray
    splits: np.ndarray
    image_stats: ImageStats
    target_stats: TargetStats

    @classmethod
    def from_dataset(cls, ds):
        if ds.images is None:
            raise ValueError("dataset has no images; run the feature stage")
        return cls(images=ds.images, targets=ds.targets, splits=ds.splits,
                   image_stats=ds.image_stats, target_stats=ds.target_stats)

    @classmethod
    def from_monolithic(cls, images, targets, splits, image_stats):
        stats = compute_target_stats(targets[splits == 0])
        return cls(images=images, targets=targets, splits=splits,
                   image_stats=image_stats, target_stats=stats)


def decode_controlled(raw_c):
    """Sign rule: positive = COM sway, negative = joint angle."""
    return Controlled.COM_SWAY if raw_c >= 0 else Controlled.JOINT_ANGLE


def params_from_deviations(vec, module_defaults):
    """Physical ModuleParams from a destandardized 5-vector of normalized
    deviations; deviations below -1 (negative physical values) clamp to -1,
    the controlled variable decodes by sign."""
    dev = np.maximum(np.asarray(vec, dtype=float)[:4], -1.0)
    return ModuleParams(
        kp=module_defaults.kp * (1.0 + dev[0]),
        ki=module_defaults.ki * (1.0 + dev[1]),
        kd=module_defaults.kd * (1.0 + dev[2]),
        delay=module_defaults.delay * (1.0 + dev[3]),
        controlled=decode_controlled(vec[4]))


def predict_params(net, image, module_defaults, stats=None):
    """Identify one module: destandardize the prediction, map the normalized
    deviations back to physical units via the module defaults, decode the
    controlled variable by sign.  Returns (ModuleParams, destandardized
    5-vector)."""
    image_stats = stats[0] if stats else net.image_stats
    target_stats = stats[1] if stats else net.target_stats
    x = prepare_images(_image_array(image)[None], image_stats)
    raw = forward_batch(net, x)[0].astype(np.float64)
    vec = destandardize_targets(raw, target_stats)
    return params_from_deviations(vec, module_defaults), vec


def save_checkpoint(net, path):
    """magic PCNN, u32 version, u64 json length, json header, then the named
    tensors in the dataset binary format."""
    tensors = []
    names = []
    for i, arr in enumerate(net.parameter_arrays()):
        names.append(f"param_{i}")
        tensors.append(arr)
    for i, v in enumerate(net.momenta):
        names.append(f"momentum_{i}")
        tensors.append(v.numpy().astype(np.float32))
    for label, stats in (("image", net.image_stats), ("target", net.target_stats)):
        if stats is not None:
            names.append(f"{label}_mean")
            tensors.append(np.asarray(stats.mean, dtype=np.float32))
            names.append(f"{label}_variance")
            tensors.append(np.asarray(stats.variance, dtype=np.float32))
    header = {
        "arch": {
            "in_channels": net.spec.in_channels,
            "out_dim": net.spec.out_dim,
            "height": net.spec.height,
            "width": net.spec.width,
            "widths": list(net.spec.widths),
        },
        "seed": net.seed,
        "history": net.history,
        "tensors": names,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in tensors:
            fh.write(serialize.tensor_bytes(arr))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    version, json_len = struct.unpack_from("<IQ", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[16:16 + json_len].decode())
    offset = 16 + json_len
    tensors = {}
    for name in header["tensors"]:
        arr, offset = serialize.tensor_from_buffer(buf, offset)
        tensors[name] = arr
    arch = header["arch"]
    spec = ArchSpec(in_channels=arch["in_channels"], out_dim=arch["out_dim"],
                    height=arch["height"], width=arch["width"],
                    widths=tuple(arch["widths"]))
    net = init(spec, header["seed"], scheme="zeros")
    with torch.no_grad():
        for i, p in enumerate(net.parameters()):
            p.copy_(torch.from_numpy(tensors[f"param_{i}"]))
        for i, v in enumerate(net.momenta):
            v.copy_(torch.from_numpy(tensors[f"momentum_{i}"]))
    net.history = header["history"]
    if "image_mean" in tensors:
        net.image_stats = ImageStats(mean=tensors["image_mean"].astype(np.float64),
                                     variance=tensors["image_variance"].astype(np.float64))
    if "target_mean" in tensors:
        net.target_stats = TargetStats(mean=tensors["target_mean"].astype(np.float64),
                                       variance=tensors["target_variance"].astype(np.float64))
    return net


def check_gradients(net, images, targets, eps=1e-5):
    """Central-difference check of every parameter entry, in float64.

    Returns the worst relative error across all parameters.  Intended for
    tiny nets; cost is two forward passes per parameter entry.  Operates on a
    float64 copy, leaving the network untouched.
    """
    import copy

    module = copy.deepcopy(net.module).double()
    x = _to_torch(images, torch.float64)
    t = torch.from_numpy(np.asarray(targets, dtype=np.float64))
    module.zero_grad(set_to_none=False)
    loss = torch.nn.functional.mse_loss(module(x), t)
    loss.backward()
    worst = 0.0
    with torch.no_grad():
        for p in module.parameters():
            flat = p.view(-1)
            grad = p.grad.view(-1)
            for i in range(flat.shape[0]):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(torch.nn.functional.mse_loss(module(x), t))
                flat[i] = orig - eps
                down = float(torch.nn.functional.mse_loss(module(x), t))
                flat[i] = orig
                fd = (up - down) / (2.0 * eps)
                an = float(grad[i])
                denom = max(abs(fd), abs(an), 1e-8)
                worst = max(worst, abs(fd - an) / denom)
    return worst
