"""3D holistically-nested segmentation network.

Backbone: VGG-style stages of ``convs_per_stage`` 3x3x3 convolutions (pad 1,
ReLU), with 2x2x2 max pooling between stages. Only the deeper stages listed
in ``side_stages`` get a side branch: a 1x1x1 projection to one channel and
a learnable transposed convolution (kernel 2f, stride f, pad f/2, bilinear
init) that brings it back to input resolution, f = 2**(stage - 1). Side
logits are summed element-wise and a single sigmoid gives the fused map.
"""
import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import engine
from .engine import NonFiniteError, Parameter
from .losses import weighted_dice_loss_backward, weighted_dice_loss_forward
from .volcore import Volume3D, volume_to_tensor

__all__ = [
    "Hed3DConfig",
    "Hed3DNet",
    "TrainConfig",
    "HistoryRow",
    "build",
    "forward",
    "forward_train",
    "backward",
    "train",
    "predict",
    "parameter_shapes",
    "parameter_count",
    "bilinear_kernel",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hed3DConfig:
    widths: tuple = (16, 32, 64, 128, 128)
    convs_per_stage: int = 2
    kernel: int = 3
    side_stages: tuple = (3, 4, 5)
    input_dims: tuple = (128, 128, 64)  # (nx, ny, nz)
    deep_supervision: bool = False
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "side_stages", tuple(sorted(int(s) for s in self.side_stages)))
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))

    @classmethod
    def desk(cls, **overrides):
        base = dict(widths=(4, 8, 16, 32, 32), input_dims=(64, 64, 32))
        base.update(overrides)
        return cls(**base)

    @property
    def stages(self):
        return len(self.widths)

    def validate(self):
        if self.stages < 1 or min(self.widths) < 1:
            raise ValueError(f"invalid stage widths {self.widths}")
        if self.convs_per_stage < 1:
            raise ValueError("convs_per_stage must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd size, got {self.kernel}")
        if not self.side_stages:
            raise ValueError("at least one side stage is required")
        if any(s < 1 or s > self.stages for s in self.side_stages):
            raise ValueError(f"side stages {self.side_stages} outside 1..{self.stages}")
        if self.stages not in self.side_stages:
            raise ValueError("the deepest stage must have a side output")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValueError(f"invalid input dims {self.input_dims}")
        div = 2 ** (self.stages - 1)
        for axis, d in zip("xyz", self.input_dims):
            if d % div:
                raise ValueError(
                    f"input dim {axis}={d} not divisible by 2**(stages-1)={div} for {self.stages} stages"
                )
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def upsample_factor(stage):
    return 2 ** (stage - 1)


def bilinear_kernel(factor):
    """(2f)^3 trilinear-interpolation kernel for a stride-f transposed conv."""
    k = 2 * factor
    center = factor - 0.5
    og = np.arange(k)
    f1 = 1 - np.abs(og - center) / factor
    return f1[:, None, None] * f1[None, :, None] * f1[None, None, :]


def parameter_shapes(cfg):
    """Ordered {name: shape}, derived from the config alone."""
    shapes = {}
    cin = cfg.in_channels
    k = cfg.kernel
    for s, width in enumerate(cfg.widths, start=1):
        for j in range(1, cfg.convs_per_stage + 1):
            shapes[f"stage{s}.conv{j}.weight"] = (width, cin, k, k, k)
            shapes[f"stage{s}.conv{j}.bias"] = (width,)
            cin = width
        if s in cfg.side_stages:
            shapes[f"side{s}.proj.weight"] = (1, width, 1, 1, 1)
            shapes[f"side{s}.proj.bias"] = (1,)
            f = upsample_factor(s)
            if f > 1:
                shapes[f"side{s}.up.weight"] = (1, 1, 2 * f, 2 * f, 2 * f)
    return shapes


def parameter_count(cfg):
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


class Hed3DNet:
    def __init__(self, config, params):
        self.config = config
        self.params = params  # ordered dict name -> Parameter

    def __getitem__(self, name):
        return self.params[name].value

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state_dict(self, state):
        for n, p in self.params.items():
            p.value[...] = state[n]

    def __repr__(self):
        return f"Hed3DNet({self.config}, params={parameter_count(self.config)})"


def build(config, seed=0):
    """Fresh network: He-uniform conv weights, zero biases, bilinear upsampling."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            value = np.zeros(shape, dtype=np.float32)
        elif ".up." in name:
            value = bilinear_kernel(shape[2] // 2)[None, None].astype(np.float32)
        else:
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, shape).astype(np.float32)
        params[name] = Parameter(name, value)
    return Hed3DNet(config, params)


def _check_input(net, x):
    cfg = net.config
    nx, ny, nz = cfg.input_dims
    if x.ndim != 5 or x.shape[1] != cfg.in_channels or x.shape[2:] != (nz, ny, nx):
        raise ValueError(
            f"input shape {x.shape} does not match (N, {cfg.in_channels}, {nz}, {ny}, {nx})"
        )


def forward_train(net, x):
    """Forward pass keeping every intermediate needed by :func:`backward`.

    Returns (fused_prob, side_probs dict, cache).
    """
    _check_input(net, x)
    cfg = net.config
    p = net.params
    x = x.astype(p["stage1.conv1.weight"].value.dtype, copy=False)
    k = cfg.kernel
    pad = k // 2
    stage_caches = []
    side_caches = {}
    logits = {}
    h = x
    for s in range(1, cfg.stages + 1):
        sc = {}
        if s > 1:
            h, sc["pool"] = engine.maxpool3d_forward(h, 2, 2)
        convs = []
        for j in range(1, cfg.convs_per_stage + 1):
            h, cc = engine.conv3d_forward(h, p[f"stage{s}.conv{j}.weight"].value, p[f"stage{s}.conv{j}.bias"].value, 1, pad)
            h, rc = engine.relu_forward(h)
            convs.append((cc, rc))
        sc["convs"] = convs
        stage_caches.append(sc)
        if s in cfg.side_stages:
            z, pc = engine.conv3d_forward(h, p[f"side{s}.proj.weight"].value, p[f"side{s}.proj.bias"].value)
            f = upsample_factor(s)
            uc = None
            if f > 1:
                z, uc = engine.conv_transpose3d_forward(z, p[f"side{s}.up.weight"].value, None, f, f // 2)
            logits[s] = z
            side_caches[s] = (pc, uc)
    fused = None
    for s in cfg.side_stages:
        fused = logits[s] if fused is None else engine.add_forward(fused, logits[s])[0]
    prob, sig_cache = engine.sigmoid_forward(fused)
    side_probs = {}
    side_sig = {}
    for s in cfg.side_stages:
        side_probs[s], side_sig[s] = engine.sigmoid_forward(logits[s])
    if not np.isfinite(prob).all():
        raise NonFiniteError("non-finite values in network output")
    cache = (stage_caches, side_caches, sig_cache, side_sig)
    return prob, side_probs, cache


def forward(net, x):
    """(fused probability map, {stage: side probability map})."""
    prob, sides, _ = forward_train(net, x)
    return prob, sides


def backward(net, cache, g_prob, g_sides=None):
    """Accumulate parameter gradients for upstream grads on the fused and side maps."""
    cfg = net.config
    p = net.params
    stage_caches, side_caches, sig_cache, side_sig = cache
    g_fused = engine.sigmoid_backward(g_prob, sig_cache)
    g_feat = {}
    for s in cfg.side_stages:
        g = g_fused
        if g_sides is not None and g_sides.get(s) is not None:
            g = g + engine.sigmoid_backward(g_sides[s], side_sig[s])
        pc, uc = side_caches[s]
        if uc is not None:
            g, gw, _ = engine.conv_transpose3d_backward(g, uc)
            p[f"side{s}.up.weight"].grad += gw
        g, gw, gb = engine.conv3d_backward(g, pc)
        p[f"side{s}.proj.weight"].grad += gw
        p[f"side{s}.proj.bias"].grad += gb
        g_feat[s] = g
    g = None
    for s in range(cfg.stages, 0, -1):
        if s in g_feat:
            g = g_feat[s] if g is None else g + g_feat[s]
        sc = stage_caches[s - 1]
        for j in range(cfg.convs_per_stage, 0, -1):
            cc, rc = sc["convs"][j - 1]
            g = engine.relu_backward(g, rc)
            g, gw, gb = engine.conv3d_backward(g, cc)
            p[f"stage{s}.conv{j}.weight"].grad += gw
            p[f"stage{s}.conv{j}.bias"].grad += gb
        if s > 1:
            g = engine.maxpool3d_backward(g, sc["pool"])
    return g


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    lr: float = 1e-4
    plateau_factor: float = 0.2
    plateau_patience: int = 10
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    validation_fraction: float = 0.2
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        return self


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def _stack(items, idx):
    xs = np.concatenate([items[i][0] for i in idx], axis=0)
    ys = np.concatenate([items[i][1] for i in idx], axis=0)
    return xs, ys


def _as_pair(x, y):
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.float32)
    while x.ndim < 5:
        x = x[None]
    while y.ndim < 5:
        y = y[None]
    return x, y


def _loss(net, prob, sides, y):
    """Loss and upstream grads for a forward result."""
    loss, c = weighted_dice_loss_forward(prob, y)
    if not net.config.deep_supervision:
        return float(loss), weighted_dice_loss_backward(1.0, c)[0], None
    terms = 1 + len(sides)
    g_prob = weighted_dice_loss_backward(1.0 / terms, c)[0]
    total = float(loss)
    g_sides = {}
    for s, sp in sides.items():
        ls, cs = weighted_dice_loss_forward(sp, y)
        total += float(ls)
        g_sides[s] = weighted_dice_loss_backward(1.0 / terms, cs)[0]
    return total / terms, g_prob, g_sides


def evaluate_loss(net, data, batch_size=2):
    total = 0.0
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        x, y = _stack(data, idx)
        prob, sides = forward(net, x)
        loss, _, _ = _loss(net, prob, sides, y)
        total += loss * len(idx)
    return total / len(data)


def train(net, train_set, val_set, tc, on_epoch=None, checkpoint_path=None):
    """Adam + reduce-on-plateau training on the fused weighted Dice loss.

    ``train_set``/``val_set`` are sequences of (image, mask) arrays already
    normalised to [0, 1] and shaped like one network input item. The
    returned net carries the weights of the best validation epoch.
    """
    tc.validate()
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    train_set = [_as_pair(x, y) for x, y in train_set]
    val_set = [_as_pair(x, y) for x, y in val_set]
    rng = np.random.default_rng(tc.seed)
    sched = engine.PlateauSchedule(
        lr=tc.lr,
        factor=tc.plateau_factor,
        patience=tc.plateau_patience,
        min_lr=min(tc.min_lr, tc.lr),
        threshold=tc.plateau_threshold,
    )
    params = net.parameters()
    history = []
    best_val = math.inf
    best_state = net.state_dict()
    for epoch in range(1, tc.epochs + 1):
        lr = sched.lr
        order = rng.permutation(len(train_set))
        losses = []
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            idx = order[start:start + tc.batch_size]
            x, y = _stack(train_set, idx)
            prob, sides, cache = forward_train(net, x)
            loss, g_prob, g_sides = _loss(net, prob, sides, y)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            net.zero_grad()
            backward(net, cache, g_prob, g_sides)
            engine.adam_step(params, lr)
            losses.append(loss * len(idx))
        net.zero_grad()
        train_loss = float(np.sum(losses) / len(train_set))
        val_loss = evaluate_loss(net, val_set, tc.batch_size)
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
        engine.plateau_step(sched, val_loss)
        row = HistoryRow(epoch, train_loss, val_loss, lr)
        history.append(row)
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, train_loss, val_loss, lr)
        if val_loss < best_val:
            best_val = val_loss
            best_state = net.state_dict()
        if checkpoint_path is not None and tc.checkpoint_every and epoch % tc.checkpoint_every == 0:
            from .volio import save_checkpoint

            snapshot = copy.deepcopy(net)
            snapshot.load_state_dict(best_state)
            save_checkpoint(snapshot, checkpoint_path)
        if on_epoch is not None:
            on_epoch(row, net)
    net.load_state_dict(best_state)
    return net, history


def predict(net, vol, scale=255.0):
    """Probability map for one windowed volume (intensities in [0, scale])."""
    nx, ny, nz = net.config.input_dims
    if vol.dims != (nx, ny, nz):
        raise ValueError(f"volume dims {vol.dims} != network input dims {(nx, ny, nz)}")
    x = volume_to_tensor(vol, scale)
    prob, _ = forward(net, x)
    return Volume3D(prob[0, 0], vol.spacing, vol.origin)
