"""Convolutional capacity regressor on 5x5x2 segment tensors.

Three blocks of three conv + batch-norm + ReLU layers with "same" padding
(extra row/column at the bottom/right for even kernels), optional per-block
residual skip through a 1x1 projection, then flatten(100) -> 22 -> 1.

Adam is implemented here rather than taken from ``torch.optim`` so the
update rule is explicit and testable; autograd supplies the gradients.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datagen import SegmentDataset
from .params import NOMINAL_CAPACITY_AH

log = logging.getLogger(__name__)

DEFAULT_BLOCKS = (
    ((11, 2, 1), (7, 2, 1), (8, 2, 1)),
    ((14, 2, 3), (11, 2, 3), (11, 2, 3)),
    ((12, 5, 4), (15, 5, 4), (4, 5, 4)),
)
WEIGHTS_MAGIC = b"SOHNETW1"
WEIGHTS_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    blocks: tuple = DEFAULT_BLOCKS
    fc_hidden: int = 22
    residual: bool = True
    in_channels: int = 2
    grid: int = 5
    bn_momentum: float = 0.9  # running = momentum * running + (1 - momentum) * batch

    def to_json(self) -> dict:
        d = asdict(self)
        d["blocks"] = [[list(layer) for layer in b] for b in self.blocks]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["blocks"] = tuple(tuple(tuple(layer) for layer in b) for b in d["blocks"])
        return cls(**d)


@dataclass
class TrainingConfig:
    batch_size: int = 1024
    lr_init: float = 5e-4
    max_epochs: int = 30
    lr_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    init_output_bias: bool = True  # start the output bias at the mean label

    def __post_init__(self):
        if self.batch_size < 1 or self.lr_init <= 0 or self.max_epochs < 0:
            raise ValueError("batch_size, lr_init must be positive and max_epochs non-negative")
        if not 0 <= self.lr_decay < 1:
            raise ValueError("lr_decay must lie in [0, 1)")


class SamePadConv(nn.Module):
    def __init__(self, c_in, c_out, kh, kw):
        super().__init__()
        # no bias: the following batch norm's offset makes it redundant
        self.conv = nn.Conv2d(c_in, c_out, (kh, kw), bias=False)
        top, left = (kh - 1) // 2, (kw - 1) // 2
        self.pad = (left, kw - 1 - left, top, kh - 1 - top)

    def forward(self, x):
        return self.conv(F.pad(x, self.pad))


class ConvBlock(nn.Module):
    def __init__(self, c_in, layers, residual, momentum):
        super().__init__()
        convs, norms = [], []
        c = c_in
        for filters, kh, kw in layers:
            convs.append(SamePadConv(c, filters, kh, kw))
            norms.append(nn.BatchNorm2d(filters, momentum=1.0 - momentum))
            c = filters
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.skip = nn.Conv2d(c_in, c, 1) if residual else None
        self.act = nn.ReLU()
        self.out_channels = c

    def forward(self, x):
        h = x
        last = len(self.convs) - 1
        for k, (conv, bn) in enumerate(zip(self.convs, self.norms)):
            h = bn(conv(h))
            if k < last or self.skip is None:
                h = self.act(h)
        if self.skip is not None:
            h = self.act(h + self.skip(x))
        return h


class SohNet(nn.Module):
    def __init__(self, spec: NetworkSpec = NetworkSpec()):
        super().__init__()
        self.spec = spec
        blocks = []
        c = spec.in_channels
        for layers in spec.blocks:
            blocks.append(ConvBlock(c, layers, spec.residual, spec.bn_momentum))
            c = blocks[-1].out_channels
        self.blocks = nn.ModuleList(blocks)
        n_flat = c * spec.grid * spec.grid
        self.fc1 = nn.Linear(n_flat, spec.fc_hidden)
        self.bn_fc = nn.BatchNorm1d(spec.fc_hidden, momentum=1.0 - spec.bn_momentum)
        self.fc2 = nn.Linear(spec.fc_hidden, 1)
        self.act = nn.ReLU()

    def forward(self, x):
        # x: (N, 2, 5, 5) channel-first
        for b in self.blocks:
            x = b(x)
        x = torch.flatten(x.permute(0, 2, 3, 1), 1)  # (h, w, c) order
        x = self.act(self.bn_fc(self.fc1(x)))
        return self.fc2(x).squeeze(-1)

    def head_parameters(self):
        return list(self.fc1.parameters()) + list(self.bn_fc.parameters()) + list(self.fc2.parameters())


class ModelWeights:
    """A network and its parameters; ``training`` mirrors the module flag."""

    def __init__(self, module: SohNet):
        self.module = module

    @property
    def spec(self) -> NetworkSpec:
        return self.module.spec

    @property
    def training(self) -> bool:
        return self.module.training

    @property
    def dtype(self):
        return next(self.module.parameters()).dtype

    def named_parameters(self):
        return dict(self.module.named_parameters())

    def state(self) -> dict:
        return {k: v.detach().clone() for k, v in self.module.state_dict().items()}

    def copy(self) -> "ModelWeights":
        m = SohNet(self.spec).to(self.dtype)
        m.load_state_dict(self.module.state_dict())
        m.train(self.module.training)
        return ModelWeights(m)

    def to(self, dtype) -> "ModelWeights":
        w = self.copy()
        w.module.to(dtype)
        return w

    def zero_(self) -> "ModelWeights":
        with torch.no_grad():
            for p in self.module.parameters():
                p.zero_()
        return self

    def all_finite(self) -> bool:
        return all(torch.isfinite(v).all() for v in self.module.state_dict().values() if v.is_floating_point())


def init_weights(spec: NetworkSpec = NetworkSpec(), seed: int = 0, dtype=torch.float32) -> ModelWeights:
    """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)), seeded."""
    net = SohNet(spec)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                mod.weight.uniform_(-bound, bound, generator=g)
                if mod.bias is not None:
                    mod.bias.uniform_(-bound, bound, generator=g)
    net.to(dtype)
    return ModelWeights(net)


def _as_input(batch, dtype) -> torch.Tensor:
    if isinstance(batch, SegmentDataset):
        arr = batch.planes
    else:
        arr = np.asarray(batch)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.shape[1:] == (5, 5, 2):
            arr = np.moveaxis(arr, -1, 1)
    if arr.ndim != 4 or arr.shape[1:] != (2, 5, 5):
        raise ValueError(f"expected segment tensors of shape (5, 5, 2), got {np.shape(batch)}")
    return torch.as_tensor(np.ascontiguousarray(arr)).to(dtype)


def forward(weights: ModelWeights, batch, mode: str = "eval") -> np.ndarray:
    """Capacity (Ah) per item.  Eval mode uses running batch-norm statistics
    and leaves the weights untouched."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    x = _as_input(batch, weights.dtype)
    if len(x) == 0:
        raise ValueError("empty batch")
    net = weights.module
    was = net.training
    net.train(mode == "train")
    with torch.no_grad():
        out = net(x)
    net.train(was)
    return out.numpy().astype(float)


def predict(weights: ModelWeights, dataset, batch_size: int = 8192) -> np.ndarray:
    n = len(dataset)
    if n == 0:
        return np.zeros(0)
    planes = dataset.planes if isinstance(dataset, SegmentDataset) else np.moveaxis(np.asarray(dataset), -1, 1)
    return np.concatenate([forward(weights, planes[k:k + batch_size], "eval") for k in range(0, n, batch_size)])


def loss_and_gradients(weights: ModelWeights, batch, labels, update_stats: bool = True):
    """MSE (Ah^2) in train mode and its gradient for every parameter.

    With ``update_stats=False`` batch-norm running statistics are restored
    afterwards (used by gradient checks)."""
    net = weights.module
    x = _as_input(batch, weights.dtype)
    y = torch.as_tensor(np.asarray(labels, dtype=float)).to(weights.dtype)
    if len(x) != len(y):
        raise ValueError("batch and labels differ in length")
    saved = None if update_stats else {k: v.clone() for k, v in net.named_buffers()}
    was = net.training
    net.train(True)
    for p in net.parameters():
        p.grad = None
    loss = F.mse_loss(net(x), y)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {k: p.grad.detach().clone() for k, p in net.named_parameters()}
    net.train(was)
    if saved is not None:
        with torch.no_grad():
            for k, v in net.named_buffers():
                v.copy_(saved[k])
    return float(loss.item()), grads


def batch_loss(weights: ModelWeights, batch, labels, mode: str = "train") -> float:
    """MSE without gradients; batch-norm running statistics are left untouched."""
    net = weights.module
    x = _as_input(batch, weights.dtype)
    y = torch.as_tensor(np.asarray(labels, dtype=float)).to(weights.dtype)
    saved = {k: v.clone() for k, v in net.named_buffers()}
    was = net.training
    net.train(mode == "train")
    with torch.no_grad():
        loss = F.mse_loss(net(x), y).item()
        for k, v in net.named_buffers():
            v.copy_(saved[k])
    net.train(was)
    return float(loss)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(weights: ModelWeights, gradients: dict, opt_state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, names=None):
    """In-place bias-corrected Adam step over the parameters in ``gradients``
    (or the subset ``names``)."""
    opt_state.step += 1
    t = opt_state.step
    params = weights.named_parameters()
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for name in (names if names is not None else gradients):
            g = gradients[name]
            p = params[name]
            m = opt_state.m.get(name)
            v = opt_state.v.get(name)
            if m is None:
                m = torch.zeros_like(p)
                v = torch.zeros_like(p)
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * g * g
            opt_state.m[name], opt_state.v[name] = m, v
            p -= lr * (m / c1) / (torch.sqrt(v / c2) + eps)
    return weights, opt_state


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_rmse_ah: float
    train_rmse_pct: float


def train(dataset: SegmentDataset, spec: NetworkSpec = NetworkSpec(), config: TrainingConfig = TrainingConfig(),
          weights: ModelWeights | None = None, trainable=None, epoch_callback=None):
    """Mini-batch Adam on MSE.  Returns ``(weights, history)``; history holds
    one :class:`EpochRecord` per epoch (train RMSE accumulated over batches)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    if weights is None:
        weights = init_weights(spec, config.seed)
        if config.init_output_bias and config.max_epochs > 0:
            with torch.no_grad():
                weights.module.fc2.bias.fill_(float(np.mean(dataset.labels)))
    names = None
    if trainable is not None:
        names = [n for n, p in weights.module.named_parameters() if any(p is q for q in trainable)]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A1]))
    state = AdamState()
    history = []
    lr = config.lr_init
    n = len(dataset)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        sq, count = 0.0, 0
        for k in range(0, n, config.batch_size):
            idx = order[k:k + config.batch_size]
            if len(idx) < 2 and n >= 2:
                continue  # batch norm needs two items
            try:
                loss, grads = loss_and_gradients(weights, dataset.planes[idx], dataset.labels[idx])
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
            adam_update(weights, grads, state, lr, config.beta1, config.beta2, config.eps, names)
            sq += loss * len(idx)
            count += len(idx)
        rmse = math.sqrt(sq / max(count, 1))
        history.append(EpochRecord(epoch, lr, rmse, 100.0 * rmse / NOMINAL_CAPACITY_AH))
        log.info("epoch %d lr %.3g train rmse %.4f Ah", epoch, lr, rmse)
        if epoch_callback is not None:
            epoch_callback(weights, history[-1])
        lr *= 1.0 - config.lr_decay
    weights.module.eval()
    return weights, history


# ---------------------------------------------------------------- transfer


@dataclass
class TransferConfig:
    n_real: int = 5000
    n_sim: int = 50000
    epochs: int = 5
    lr: float = 1e-5
    lr_decay: float = 0.05
    batch_size: int = 1024
    head_only: bool = False
    replicate: str = "tile"  # or "random"
    seed: int = 0


def replicate_segments(real: SegmentDataset, n: int, how: str = "tile", seed: int = 0) -> SegmentDataset:
    """Repeat real segments to ``n`` items.  ``tile`` cycles through them
    (counts differ by at most one); ``random`` draws indices with replacement."""
    if len(real) == 0 or n <= 0:
        return SegmentDataset()
    if how == "tile":
        idx = np.arange(n) % len(real)
    elif how == "random":
        idx = np.random.default_rng(np.random.SeedSequence([seed, 0x4E9])).integers(0, len(real), n)
    else:
        raise ValueError(f"unknown replication mode {how!r}")
    return real.subset(idx)


def build_transfer_set(real: SegmentDataset, sim_pool: SegmentDataset, cfg: TransferConfig) -> SegmentDataset:
    if len(sim_pool) == 0 and len(real) == 0:
        raise ValueError("transfer needs real or simulated segments")
    reps = replicate_segments(real, cfg.n_real, cfg.replicate, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x51A]))
    n_sim = min(cfg.n_sim, len(sim_pool))
    sims = sim_pool.subset(np.sort(rng.choice(len(sim_pool), n_sim, replace=False))) if n_sim else SegmentDataset()
    return SegmentDataset.concat([reps, sims])


def transfer_finetune(weights: ModelWeights, real_segments: SegmentDataset, sim_pool: SegmentDataset,
                      config_override: TransferConfig | None = None) -> ModelWeights:
    """Fine-tune a copy of ``weights`` on replicated real segments merged
    with a seeded sample of simulated ones."""
    cfg = config_override or TransferConfig()
    data = build_transfer_set(real_segments, sim_pool, cfg)
    w = weights.copy()
    trainable = w.module.head_parameters() if cfg.head_only else None
    tcfg = TrainingConfig(batch_size=cfg.batch_size, lr_init=cfg.lr, max_epochs=cfg.epochs, lr_decay=cfg.lr_decay,
                          seed=cfg.seed, init_output_bias=False)
    w, _ = train(data, w.spec, tcfg, weights=w, trainable=trainable)
    return w


# ---------------------------------------------------------------- evaluation


def evaluate(weights: ModelWeights, dataset: SegmentDataset, nominal_ah: float = NOMINAL_CAPACITY_AH,
             predictions=None) -> dict:
    """RMSE (Ah), mean absolute SOH error (% of nominal), per-cell breakdown
    and the share of estimates within 1% and 2%."""
    pred = predict(weights, dataset) if predictions is None else np.asarray(predictions, dtype=float)
    err = pred - dataset.labels
    soh_err = 100.0 * np.abs(err) / nominal_ah
    per_cell = {}
    for cell in np.unique(dataset.ids[:, 0]) if len(dataset) else []:
        m = dataset.ids[:, 0] == cell
        per_cell[int(cell)] = {"n": int(m.sum()), "mae_soh_pct": float(soh_err[m].mean()),
                               "rmse_ah": float(np.sqrt(np.mean(err[m] ** 2)))}
    n = len(dataset)
    return {
        "n": n,
        "rmse_ah": float(np.sqrt(np.mean(err**2))) if n else 0.0,
        "mae_soh_pct": float(soh_err.mean()) if n else 0.0,
        "within_1pct": float(np.mean(soh_err <= 1.0)) if n else 0.0,
        "within_2pct": float(np.mean(soh_err <= 2.0)) if n else 0.0,
        "per_cell": per_cell,
    }


# ---------------------------------------------------------------- weights file


def save_weights(weights: ModelWeights, path) -> None:
    """Magic, u32 version, u32 manifest length, JSON manifest, then the
    tensors as little-endian float32 in manifest order."""
    sd = weights.module.state_dict()
    entries = []
    blob = io.BytesIO()
    for name, t in sd.items():
        if not t.is_floating_point():
            entries.append({"name": name, "shape": list(t.shape), "int": int(t.item())})
            continue
        entries.append({"name": name, "shape": list(t.shape)})
        blob.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    manifest = json.dumps({"spec": weights.spec.to_json(), "tensors": entries, "training": weights.training},
                          sort_keys=True).encode()
    data = WEIGHTS_MAGIC + struct.pack("<II", WEIGHTS_VERSION, len(manifest)) + manifest + blob.getvalue()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_weights(path) -> ModelWeights:
    data = Path(path).read_bytes()
    if data[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    off = len(WEIGHTS_MAGIC)
    version, mlen = struct.unpack_from("<II", data, off)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    off += 8
    manifest = json.loads(data[off:off + mlen])
    off += mlen
    net = SohNet(NetworkSpec.from_json(manifest["spec"]))
    sd = {}
    for e in manifest["tensors"]:
        if "int" in e:
            sd[e["name"]] = torch.tensor(e["int"], dtype=torch.long)
            continue
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(e["shape"])
        off += 4 * count
        sd[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing tensor data")
    net.load_state_dict(sd)
    net.train(manifest.get("training", False))
    return ModelWeights(net)


def _relu_pattern(weights: ModelWeights, batch, labels):
    """Loss and the sign pattern of every ReLU input (train mode, stats restored)."""
    masks = []

    def hook(_m, inp, _out):
        masks.append((inp[0] > 0).flatten())

    handles = [m.register_forward_hook(hook) for m in weights.module.modules() if isinstance(m, nn.ReLU)]
    try:
        loss = batch_loss(weights, batch, labels)
    finally:
        for h in handles:
            h.remove()
    return loss, torch.cat(masks)


def gradient_check(weights: ModelWeights, batch, labels, n_weights: int = 200, h: float = 1e-5, seed: int = 0,
                   atol: float = 1e-5):
    """Central-difference check in float64 over randomly chosen weights.

    A weight whose +-h perturbation flips any ReLU input across zero sits on
    a kink where the derivative is undefined; it is skipped and another is
    drawn.  The relative error is ``|a - n| / max(|a|, |n|, atol)``: below
    ``atol`` the comparison becomes absolute, since float64 round-off in the
    loss difference (about eps * loss / h) dominates near-zero gradients.
    Returns (max relative error, rows, n_skipped)."""
    w = weights.to(torch.float64)
    _, grads = loss_and_gradients(w, batch, labels, update_stats=False)
    params = w.named_parameters()
    names = list(params)
    sizes = np.array([params[n].numel() for n in names])
    bounds = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    order = rng.permutation(int(sizes.sum()))
    rows, skipped = [], 0
    for f in order:
        if len(rows) >= n_weights:
            break
        k = int(np.searchsorted(bounds, f, side="right"))
        local = int(f - (bounds[k - 1] if k else 0))
        p = params[names[k]].view(-1)
        orig = p[local].item()
        with torch.no_grad():
            p[local] = orig + h
        lp, mp_ = _relu_pattern(w, batch, labels)
        with torch.no_grad():
            p[local] = orig - h
        lm, mm = _relu_pattern(w, batch, labels)
        with torch.no_grad():
            p[local] = orig
        if not torch.equal(mp_, mm):
            skipped += 1
            continue
        num = (lp - lm) / (2 * h)
        ana = grads[names[k]].view(-1)[local].item()
        rel = abs(ana - num) / max(abs(ana), abs(num), atol)
        rows.append((names[k], local, ana, num, rel))
    return max(r[4] for r in rows), rows, skipped
