"""CycleGAN training orchestration, checkpoints, translation and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import checkpoint as ckpt
from .augment import AugmentedDataset, augment_dataset
from .losses import (
    AdamState,
    ImagePool,
    LossWeights,
    adam_step,
    discriminator_objective,
    generator_objective,
    lr_schedule,
)
from .networks import (
    Network,
    build_discriminator,
    build_generator,
    expected_shapes,
    init_weights,
)
from .tensor import ConfigurationError, ShapeError, deterministic
from .volume import Volume, denormalize, load, normalize_intensity

log = logging.getLogger(__name__)

NETS = ("G_A2B", "G_B2A", "D_A", "D_B")


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    data_a: str = ""
    data_b: str = ""
    epochs: int = 200
    batch_size: int = 1
    base_lr: float = 2e-4
    constant_epochs: int | None = None  # defaults to ceil(epochs / 2)
    lambda_cycle: float = 10.0
    lambda_identity: float = 0.0
    pool_size: int = 50
    seed: int = 0
    rotations: int = 0
    rotation_sigma: float = 10.0
    augment_mode: str = "lazy"  # lazy | materialize
    width_divisor: int = 1
    precision: str = "single"
    deterministic: bool = True
    checkpoint_dir: str = ""
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint
    log_path: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self, check_paths: bool = False):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.batch_size != 1:
            raise ConfigurationError("only a minibatch size of 1 is supported")
        if self.precision not in ("single", "double"):
            raise ConfigurationError(f"precision must be single or double, not {self.precision!r}")
        if self.augment_mode not in ("lazy", "materialize"):
            raise ConfigurationError(f"augment_mode must be lazy or materialize")
        if self.rotations < 0 or self.pool_size < 0 or self.checkpoint_every < 0:
            raise ConfigurationError("rotations, pool_size and checkpoint_every must be >= 0")
        if self.constant_epochs is not None and not 0 <= self.constant_epochs <= self.epochs:
            raise ConfigurationError("constant_epochs must lie in [0, epochs]")
        if self.base_lr < 0:
            raise ConfigurationError("base_lr must be non-negative")
        LossWeights(self.lambda_cycle, self.lambda_identity)
        if check_paths:
            for key in ("data_a", "data_b"):
                if not getattr(self, key) or not Path(getattr(self, key)).is_dir():
                    raise ConfigurationError(f"{key} directory {getattr(self, key)!r} not found")
            if Path(self.data_a).resolve() == Path(self.data_b).resolve():
                raise ConfigurationError("data_a and data_b must be different directories")

    @property
    def decay_start(self) -> int:
        # rounding up keeps a constant phase even for a one-epoch run
        if self.constant_epochs is None:
            return (self.epochs + 1) // 2
        return self.constant_epochs

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def fingerprint(self) -> str:
        keys = ("epochs", "batch_size", "base_lr", "constant_epochs", "lambda_cycle",
                "lambda_identity", "pool_size", "seed", "rotations", "rotation_sigma",
                "width_divisor", "precision")
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**values)


@dataclass
class StepMetrics:
    step: int
    epoch: int
    lr: float
    g_total: float
    adv_a2b: float
    adv_b2a: float
    cycle_a: float
    cycle_b: float
    identity_a: float
    identity_b: float
    d_a: float
    d_b: float
    ms: float = 0.0

    def losses(self) -> tuple[float, ...]:
        """Everything except wall-clock time, for bitwise comparisons."""
        return tuple(v for k, v in asdict(self).items() if k != "ms")

    def as_line(self) -> str:
        return " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in asdict(self).items())


@dataclass
class TrainState:
    config: TrainConfig
    nets: dict[str, Network]
    opts: dict[str, AdamState]
    pools: dict[str, ImagePool]
    epoch: int = 0  # completed epochs
    step: int = 0
    # per domain: [sum of lo, sum of hi, count]
    stats: dict[str, list[float]] = field(
        default_factory=lambda: {"A": [0.0, 0.0, 0], "B": [0.0, 0.0, 0]})

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.config.lambda_cycle, self.config.lambda_identity)

    def domain_stats(self, domain: str) -> tuple[float, float]:
        lo, hi, n = self.stats[domain]
        if n == 0:
            raise ValueError(f"no intensity statistics recorded for domain {domain}")
        return lo / n, hi / n

    def record_stats(self, domain: str, stats):
        if stats is not None:
            s = self.stats[domain]
            s[0] += stats[0]
            s[1] += stats[1]
            s[2] += 1


def init_state(config: TrainConfig) -> TrainState:
    g = build_generator(config.width_divisor)
    d = build_discriminator(config.width_divisor)
    seeds = np.random.SeedSequence(config.seed).generate_state(6)
    nets = {
        "G_A2B": init_weights(g, int(seeds[0]), config.dtype),
        "G_B2A": init_weights(g, int(seeds[1]), config.dtype),
        "D_A": init_weights(d, int(seeds[2]), config.dtype),
        "D_B": init_weights(d, int(seeds[3]), config.dtype),
    }
    opts = {name: AdamState(lr=config.base_lr) for name in NETS}
    pools = {"A": ImagePool(config.pool_size, int(seeds[4])),
             "B": ImagePool(config.pool_size, int(seeds[5]))}
    return TrainState(config, nets, opts, pools)


def _first_nonfinite(named: dict[str, object]) -> str | None:
    for name, value in named.items():
        if not np.all(np.isfinite(value)):
            return name
    return None


def train_step(state: TrainState, volume_a: np.ndarray, volume_b: np.ndarray,
               lr: float | None = None, epoch: int | None = None) -> StepMetrics:
    """One generator update followed by one update of each discriminator.

    Metrics are the losses evaluated before the respective updates.
    """
    start = time.perf_counter()
    nets, cfg = state.nets, state.config
    dtype = nets["G_A2B"].dtype
    a = np.asarray(volume_a, dtype=dtype)
    b = np.asarray(volume_b, dtype=dtype)
    lr = cfg.base_lr if lr is None else lr
    for opt in state.opts.values():
        opt.lr = lr

    losses, ga2b, gb2a, (fake_b, fake_a) = generator_objective(
        a, b, nets["G_A2B"], nets["G_B2A"], nets["D_A"], nets["D_B"], state.weights)
    bad = _first_nonfinite({"generator loss": losses.total, "fake_b": fake_b,
                            "fake_a": fake_a,
                            **{f"G_A2B.{k}": v for k, v in ga2b.items()},
                            **{f"G_B2A.{k}": v for k, v in gb2a.items()}})
    if bad:
        raise NumericalError(f"non-finite value in {bad} at step {state.step + 1}")
    adam_step(nets["G_A2B"].params, ga2b, state.opts["G_A2B"])
    adam_step(nets["G_B2A"].params, gb2a, state.opts["G_B2A"])

    pooled_a = state.pools["A"].query(fake_a)
    pooled_b = state.pools["B"].query(fake_b)
    d_a, grads_da = discriminator_objective(nets["D_A"], a, pooled_a)
    d_b, grads_db = discriminator_objective(nets["D_B"], b, pooled_b)
    bad = _first_nonfinite({"D_A loss": d_a, "D_B loss": d_b,
                            **{f"D_A.{k}": v for k, v in grads_da.items()},
                            **{f"D_B.{k}": v for k, v in grads_db.items()}})
    if bad:
        raise NumericalError(f"non-finite value in {bad} at step {state.step + 1}")
    adam_step(nets["D_A"].params, grads_da, state.opts["D_A"])
    adam_step(nets["D_B"].params, grads_db, state.opts["D_B"])

    state.step += 1
    return StepMetrics(
        step=state.step, epoch=state.epoch + 1 if epoch is None else epoch, lr=lr,
        g_total=losses.total, adv_a2b=losses.adv_a2b, adv_b2a=losses.adv_b2a,
        cycle_a=losses.cycle_a, cycle_b=losses.cycle_b,
        identity_a=losses.identity_a, identity_b=losses.identity_b,
        d_a=d_a, d_b=d_b, ms=(time.perf_counter() - start) * 1000.0)


# ------------------------------------------------------------------ data

def list_volumes(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    paths = sorted(p for p in directory.iterdir()
                   if p.name.endswith(".nii") or p.name.endswith(".nii.gz"))
    if not paths:
        raise ConfigurationError(f"no .nii/.nii.gz volumes in {directory}")
    return paths


def load_domain(config: TrainConfig, directory: str | Path, domain_index: int) -> Sequence[Volume]:
    vols = [load(p) for p in list_volumes(directory)]
    if config.rotations == 0:
        return vols
    seed = config.seed * 2 + domain_index
    return augment_dataset(vols, config.rotations, seed, config.rotation_sigma,
                           lazy=config.augment_mode == "lazy")


def epoch_pairs(seed: int, epoch: int, n_a: int, n_b: int) -> list[tuple[int, int]]:
    """Independently shuffled indices per domain, truncated to the smaller domain."""
    rng = np.random.default_rng([seed, epoch])
    perm_a = rng.permutation(n_a)
    perm_b = rng.permutation(n_b)
    n = min(n_a, n_b)
    return [(int(perm_a[i]), int(perm_b[i])) for i in range(n)]


def run_epochs(state: TrainState, domain_a: Sequence[Volume], domain_b: Sequence[Volume],
               until_epoch: int | None = None, log_stream: TextIO | None = None,
               on_epoch_end=None) -> list[StepMetrics]:
    """Train from ``state.epoch + 1`` through ``until_epoch`` (default: all epochs)."""
    cfg = state.config
    last = cfg.epochs if until_epoch is None else until_epoch
    history = []
    with deterministic(cfg.deterministic):
        for epoch in range(state.epoch + 1, last + 1):
            lr = lr_schedule(epoch, cfg.base_lr, cfg.epochs, cfg.decay_start)
            for ia, ib in epoch_pairs(cfg.seed, epoch, len(domain_a), len(domain_b)):
                va = normalize_intensity(domain_a[ia])
                vb = normalize_intensity(domain_b[ib])
                state.record_stats("A", va.norm_stats)
                state.record_stats("B", vb.norm_stats)
                m = train_step(state, va.data, vb.data, lr=lr, epoch=epoch)
                history.append(m)
                if log_stream is not None:
                    log_stream.write(m.as_line() + "\n")
                    log_stream.flush()
            state.epoch = epoch
            if on_epoch_end is not None:
                on_epoch_end(state)
    return history


def train(config: TrainConfig, resume: str | Path | None = None, force: bool = False,
          log_stream: TextIO | None = None) -> TrainState:
    """Full training run with periodic and final checkpoints."""
    config.validate(check_paths=True)
    domain_a = load_domain(config, config.data_a, 0)
    domain_b = load_domain(config, config.data_b, 1)
    if resume:
        state = load_checkpoint(resume)
        if state.config.fingerprint() != config.fingerprint() and not force:
            raise ConfigurationError(
                f"checkpoint {resume} was written with a different configuration "
                f"(fingerprint {state.config.fingerprint()} vs {config.fingerprint()}); "
                f"pass force to resume anyway")
        state.config = config
    else:
        state = init_state(config)
    ckdir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    def on_epoch_end(st):
        if ckdir is not None and config.checkpoint_every and st.epoch % config.checkpoint_every == 0:
            save_checkpoint(st, ckdir / f"epoch{st.epoch:04d}.vxcg")
        log.info("epoch %d done (%d steps)", st.epoch, st.step)

    owned = None
    if log_stream is None and config.log_path:
        owned = log_stream = open(config.log_path, "a")
    try:
        run_epochs(state, domain_a, domain_b, log_stream=log_stream, on_epoch_end=on_epoch_end)
    finally:
        if owned is not None:
            owned.close()
    if ckdir is not None:
        save_checkpoint(state, ckdir / "final.vxcg")
    return state


# ------------------------------------------------------------- checkpoints

def _arch(state: TrainState) -> dict:
    return {name: {"kind": net.spec.name, "width_divisor": state.config.width_divisor}
            for name, net in state.nets.items()}


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    records = {}
    opts = {}
    for name in NETS:
        for pname, arr in state.nets[name].params.items():
            records[f"{name}/{pname}"] = arr
        opt = state.opts[name]
        for pname in sorted(opt.m):
            records[f"opt/{name}/m/{pname}"] = opt.m[pname]
            records[f"opt/{name}/v/{pname}"] = opt.v[pname]
        opts[name] = {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                      "eps": opt.eps, "t": opt.t}
    pools = {}
    for dom, pool in state.pools.items():
        for i, vol in enumerate(pool.buffer):
            records[f"pool/{dom}/{i:04d}"] = vol
        pools[dom] = {"capacity": pool.capacity, "size": len(pool.buffer),
                      "rng": pool.rng.bit_generator.state}
    meta = {"epoch": state.epoch, "step": state.step, "arch": _arch(state),
            "optimizers": opts, "pools": pools, "stats": state.stats,
            "config": asdict(state.config), "fingerprint": state.config.fingerprint()}
    ckpt.write(path, records, meta)


def _spec_for(arch: dict):
    if arch["kind"] == "generator":
        return build_generator(arch["width_divisor"])
    if arch["kind"] == "discriminator":
        return build_discriminator(arch["width_divisor"])
    raise ckpt.CheckpointError(f"unknown architecture kind {arch['kind']!r}")


def load_checkpoint(path: str | Path, width_divisor: int | None = None) -> TrainState:
    """Load and validate every tensor shape against the architecture.

    The architecture comes from the checkpoint itself unless
    ``width_divisor`` is given, in which case the file must match it.
    """
    records, meta = ckpt.read(path)
    config = TrainConfig.from_dict(meta["config"])
    nets = {}
    for name in NETS:
        arch = dict(meta["arch"][name])
        if width_divisor is not None:
            arch["width_divisor"] = width_divisor
        spec = _spec_for(arch)
        shapes = expected_shapes(spec)
        params = {}
        for pname, shape in shapes.items():
            key = f"{name}/{pname}"
            if key not in records:
                raise ckpt.CheckpointShapeError(f"tensor {key} missing from checkpoint")
            arr = records.pop(key)
            if arr.shape != shape:
                raise ckpt.CheckpointShapeError(
                    f"tensor {key} has shape {arr.shape}, architecture expects {shape}")
            params[pname] = arr
        nets[name] = Network(spec, params)
    opts = {}
    for name in NETS:
        o = meta["optimizers"][name]
        st = AdamState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["t"])
        for pname, arr in nets[name].params.items():
            m = records.pop(f"opt/{name}/m/{pname}", None)
            v = records.pop(f"opt/{name}/v/{pname}", None)
            if m is None and v is None:
                continue
            if m is None or v is None or m.shape != arr.shape or v.shape != arr.shape:
                raise ckpt.CheckpointShapeError(
                    f"optimizer moments for {name}/{pname} missing or mis-shaped")
            st.m[pname], st.v[pname] = m, v
        opts[name] = st
    pools = {}
    for dom, info in meta["pools"].items():
        pool = ImagePool(info["capacity"])
        pool.rng.bit_generator.state = info["rng"]
        for i in range(info["size"]):
            key = f"pool/{dom}/{i:04d}"
            if key not in records:
                raise ckpt.CheckpointShapeError(f"pool volume {key} missing from checkpoint")
            pool.buffer.append(records.pop(key))
        pools[dom] = pool
    if records:
        raise ckpt.CheckpointShapeError(
            f"unexpected tensors in checkpoint: {', '.join(sorted(records)[:5])}")
    stats = {k: list(v) for k, v in meta["stats"].items()}
    return TrainState(config, nets, opts, pools, meta["epoch"], meta["step"], stats)


# -------------------------------------------------------------- inference

def translate(state: TrainState, volume: Volume, direction: str = "A2B") -> Volume:
    """Normalize, run one generator, rescale with the target domain's stats."""
    direction = direction.upper()
    if direction not in ("A2B", "B2A"):
        raise ValueError(f"direction must be A2B or B2A, not {direction!r}")
    net = state.nets["G_" + direction]
    target = direction[-1]
    stats = state.domain_stats(target)
    for axis, n in zip("xyz", volume.shape):
        if n % 4:
            fix = n - n % 4
            raise ConfigurationError(
                f"volume {axis} size {n} is not divisible by 4; crop to {fix} "
                f"or pad to {fix + 4}")
    norm = normalize_intensity(volume)
    with deterministic(state.config.deterministic):
        out = net.forward(norm.data.astype(net.dtype), cache=False)
    return denormalize(Volume(out.astype(np.float32), volume.voxel_size, stats,
                              volume.source, volume.header_raw))


def evaluate(pred: Volume | np.ndarray, reference: Volume | np.ndarray) -> dict[str, float]:
    """MAE and PSNR (peak = reference max - min); PSNR is ``inf`` for identical inputs."""
    p = pred.data if isinstance(pred, Volume) else np.asarray(pred)
    r = reference.data if isinstance(reference, Volume) else np.asarray(reference)
    if p.shape != r.shape:
        raise ShapeError(f"prediction {p.shape} and reference {r.shape} differ in shape")
    diff = p.astype(np.float64) - r.astype(np.float64)
    mae = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff * diff))
    peak = float(r.max() - r.min())
    if mse == 0.0:
        psnr = math.inf
    elif peak == 0.0:
        psnr = -math.inf
    else:
        psnr = 10.0 * math.log10(peak * peak / mse)
    return {"mae": mae, "psnr": psnr}
