"""Training loops: ERM pre-training, masked invariant learning with periodic
mask exploration, and the dense / RigL-style comparison variants."""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import mask as M
from .envdata import Environment
from .errors import ConfigError, ContractError, IngestionError, TrainingError
from .metrics import GradVarianceReport, gradient_variance, gradient_variance_report, sharpness
from .model import Architecture, features, head, init_params, masked_features, predict
from .objectives import ObjectiveConfig, erm_loss, invariant_objective, uniform_weights, var_loss
from .optim import AdamState, DualOptimizerBinding, SamConfig, adam_step, dual_route, sam_step
from .tensor import Tape, Tensor, softmax_cross_entropy, split_rows

VARIANTS = ("evil", "evil_sam", "dense_baseline", "rigl_ablation")
INV_KEYS = ("theta", "h_w", "h_b")
VAR_KEYS = ("theta", "g_w", "g_b")


@dataclass(frozen=True)
class TrainLoopConfig:
    sparsity: M.SparsityConfig = field(default_factory=M.SparsityConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    sam: SamConfig | None = None
    batch_size: int = 64
    widths: tuple = (256, 256)
    activation: str = "relu"
    seed: int = 0
    variant: str = "evil"
    lr: float = 1e-3
    mask_init: str = "magnitude"
    log_every: int = 50
    diagnostics_every: int = 0
    instrument: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.widths:
            raise ConfigError("widths must be non-empty")
        if self.mask_init not in M.INIT_STRATEGIES:
            raise ConfigError(f"mask_init must be one of {M.INIT_STRATEGIES}, got {self.mask_init!r}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")
        if self.variant == "evil_sam" and self.sam is None:
            object.__setattr__(self, "sam", SamConfig(masked=True))

    @property
    def t_total(self) -> int:
        return self.sparsity.t_total

    @property
    def sparse(self) -> bool:
        return self.variant != "dense_baseline"


@dataclass
class TrainState:
    arch: Architecture
    params: dict
    adam1: AdamState
    adam2: AdamState
    mask: M.Mask | None = None
    weights: np.ndarray | None = None
    t: int = 0

    def keep(self) -> np.ndarray | None:
        return None if self.mask is None else self.mask.as_float()


@dataclass
class RunResult:
    config: TrainLoopConfig
    state: TrainState
    rows: list
    train_acc: float
    ood_acc: float | None
    exchanges: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    initial_mask: M.Mask | None = None


# ------------------------------------------------------------ batching


class Batcher:
    """Per-environment minibatches drawn with replacement from a seeded stream."""

    def __init__(self, envs, batch_size, seed, stream):
        self.envs = envs
        self.batch_size = batch_size
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, stream]))

    def __call__(self):
        xs, ys = [], []
        for env in self.envs:
            idx = self.rng.integers(0, env.n, self.batch_size)
            xs.append(env.inputs[idx])
            ys.append(env.labels[idx])
        return xs, ys


# ------------------------------------------------------------ losses and gradients


def _check_finite(value, step, what):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {what} ({value})", step=step)


def _pooled_logits(arch, theta, keep, xs, w, b):
    """One forward pass over all environments' rows, split back per environment."""
    x = np.concatenate(xs, axis=0) if len(xs) > 1 else xs[0]
    f = features(arch, theta, x) if keep is None else masked_features(arch, theta, x, keep)
    return split_rows(head(f, w, b), [len(xi) for xi in xs])


def inv_loss_grad(state: TrainState, objective: ObjectiveConfig, xs, ys, params=None, keep="mask"):
    """Invariant objective through the kept subnetwork and its gradients.

    Returns ``(result, grads)``; ``keep="mask"`` uses the state's mask, ``None``
    runs the dense network.
    """
    params = state.params if params is None else params
    keep = state.keep() if isinstance(keep, str) else keep
    with Tape() as tape:
        theta = tape.watch(Tensor(params["theta"]))
        hw = tape.watch(Tensor(params["h_w"]))
        hb = tape.watch(Tensor(params["h_b"]))
        logits = _pooled_logits(state.arch, theta, keep, xs, hw, hb)
        res = invariant_objective(objective, logits, ys, state.weights)
    grads = tape.gradient(res.loss, {"theta": theta, "h_w": hw, "h_b": hb})
    return res, grads


def var_loss_grad(state: TrainState, xs, params=None, with_theta=True):
    """Domain-discrimination loss through the pruned-side network and its gradients.

    With ``with_theta=False`` only the head-g gradients are formed, which is all
    optimizer 2 needs between explorations.
    """
    params = state.params if params is None else params
    keep_var = 1.0 - state.keep()
    with Tape() as tape:
        theta = Tensor(params["theta"])
        if with_theta:
            theta = tape.watch(theta)
        gw = tape.watch(Tensor(params["g_w"]))
        gb = tape.watch(Tensor(params["g_b"]))
        logits = _pooled_logits(state.arch, theta, keep_var, xs, gw, gb)
        loss = var_loss(logits, range(len(xs)))
    wrt = {"theta": theta, "g_w": gw, "g_b": gb} if with_theta else {"g_w": gw, "g_b": gb}
    return loss.item(), tape.gradient(loss, wrt)


def label_var_grad(state: TrainState, xs, ys):
    """Class-label loss through the pruned-side network (RigL-style regrowth score)."""
    keep_var = 1.0 - state.keep()
    with Tape() as tape:
        theta = tape.watch(Tensor(state.params["theta"]))
        logits = _pooled_logits(state.arch, theta, keep_var, xs, Tensor(state.params["h_w"]),
                                Tensor(state.params["h_b"]))
        loss, _ = erm_loss(logits, ys)
    return tape.gradient(loss, {"theta": theta})["theta"]


def dense_ce_grad(state: TrainState, xs, ys):
    res, grads = inv_loss_grad(state, ObjectiveConfig("erm"), xs, ys, keep=None)
    return res.loss.item(), grads


def effective_weight_grads(state: TrainState, env: Environment) -> np.ndarray:
    """Full-batch cross-entropy gradient with respect to the effective weights ``m * theta``."""
    theta_eff = state.params["theta"] if state.mask is None else state.params["theta"] * state.keep()
    with Tape() as tape:
        theta = tape.watch(Tensor(theta_eff))
        logits = head(features(state.arch, theta, env.inputs), Tensor(state.params["h_w"]), Tensor(state.params["h_b"]))
        loss = softmax_cross_entropy(logits, env.labels)
    return tape.gradient(loss, {"theta": theta})["theta"]


# ------------------------------------------------------------ evaluation


def eval_accuracy(state: TrainState, env: Environment) -> float:
    if env.n == 0:
        raise ContractError("cannot evaluate on an empty environment")
    pred = predict(state.arch, state.params, state.keep(), env.inputs)
    return float(np.mean(pred == env.labels))


def env_stats(state: TrainState, env: Environment) -> tuple[float, float]:
    """``(accuracy, mean cross-entropy)`` on a whole environment from one forward pass."""
    if env.n == 0:
        raise ContractError("cannot evaluate on an empty environment")
    keep = state.keep()
    theta = Tensor(state.params["theta"])
    f = features(state.arch, theta, env.inputs) if keep is None else masked_features(state.arch, theta, env.inputs, keep)
    logits = head(f, Tensor(state.params["h_w"]), Tensor(state.params["h_b"]))
    acc = float(np.mean(np.argmax(logits.data, axis=1) == env.labels))
    return acc, softmax_cross_entropy(logits, env.labels).item()


def pooled_accuracy(state: TrainState, envs) -> float:
    hits = sum(eval_accuracy(state, e) * e.n for e in envs)
    return hits / sum(e.n for e in envs)


def gradient_variance_of(state: TrainState, envs) -> GradVarianceReport:
    """Across-domain variance of full-batch effective-weight gradients, split by the mask."""
    grads = [effective_weight_grads(state, e) for e in envs]
    if state.mask is None:
        return GradVarianceReport(gradient_variance(grads), float("nan"),
                                  [float(np.linalg.norm(g)) for g in grads])
    return gradient_variance_report(grads, state.mask.bits)


def pool_loss_grad(state: TrainState, envs, keys=INV_KEYS):
    """Closure ``params -> (loss, grads)`` for the pooled training cross-entropy."""
    xs = [e.inputs for e in envs]
    ys = [e.labels for e in envs]
    keep = state.keep()

    def fn(params):
        res, grads = inv_loss_grad(state, ObjectiveConfig("erm"), xs, ys, params=params, keep=keep)
        return res.loss.item(), {k: grads[k] for k in keys}

    return fn


def final_sharpness(state: TrainState, envs, rho: float, masked: bool):
    keep = {"theta": state.keep()} if (masked and state.mask is not None) else None
    return sharpness(pool_loss_grad(state, envs), state.params, keep, rho)


# ------------------------------------------------------------ loops


def new_state(config: TrainLoopConfig, n_in: int, n_classes: int, n_domains: int) -> TrainState:
    arch = Architecture(n_in, config.widths, n_classes, n_domains, config.activation)
    params = init_params(arch, config.seed)
    return TrainState(arch, params, AdamState(lr=config.lr), AdamState(lr=config.lr))


def _dense_step(state: TrainState, config: TrainLoopConfig, objective, xs, ys):
    if config.sam is not None and config.variant == "dense_baseline":
        fn = _sam_closure(state, objective, xs, ys, keep=None)
        params, state.adam1, info = sam_step(fn, _inv_params(state), None, SamConfig(config.sam.rho, False), state.adam1)
        state.params.update(params)
        return info.loss
    res, grads = inv_loss_grad(state, objective, xs, ys, keep=None)
    if res.weights is not None:
        state.weights = res.weights
    params, state.adam1 = adam_step(state.adam1, _inv_params(state), grads)
    state.params.update(params)
    return res.loss.item()


def _inv_params(state):
    return {k: state.params[k] for k in INV_KEYS}


def _sam_closure(state, objective, xs, ys, keep):
    def fn(params):
        res, grads = inv_loss_grad(state, objective, xs, ys, params={**state.params, **params}, keep=keep)
        return res.loss.item(), grads

    return fn


def _pretrain_steps(state: TrainState, config: TrainLoopConfig, batcher: Batcher, t_pre: int):
    erm = ObjectiveConfig("erm")
    dense = TrainLoopConfig(**{**config.__dict__, "variant": "dense_baseline", "sam": None})
    for _ in range(t_pre):
        xs, ys = batcher()
        loss = _dense_step(state, dense, erm, xs, ys)
        _check_finite(loss, state.t, "pretraining loss")
        state.t += 1


def pretrain(state: TrainState, config: TrainLoopConfig, batcher: Batcher, t_pre: int) -> TrainState:
    """Dense ERM steps, then mask initialization from the resulting weights."""
    if state.t != 0:
        raise ContractError(f"pretrain expects t = 0, got {state.t}")
    _pretrain_steps(state, config, batcher, t_pre)
    if config.sparse:
        state.mask = _init_mask(state, config, batcher)
    return state


def _init_mask(state, config, batcher):
    grads = None
    if config.mask_init in ("connection_sensitivity", "fisher"):
        xs, ys = batcher()
        grads = dense_ce_grad(state, xs, ys)[1]["theta"]
    return M.init_mask(config.mask_init, state.params["theta"], config.sparsity, grads,
                       seed=config.seed, layers=state.arch.layer_offsets)


def _explore(state, config, objective, xs, ys):
    """Gradient magnitudes for both sides of the mask on one batch, then the exchange."""
    _, inv_grads = inv_loss_grad(state, objective, xs, ys)
    if config.variant == "rigl_ablation":
        var_grads = {"theta": label_var_grad(state, xs, ys), "g_w": None, "g_b": None}
        source = "class_head"
    else:
        var_grads = var_loss_grad(state, xs)[1]
        source = "domain_head"
    routed = dual_route(DualOptimizerBinding.from_mask(state.mask), inv_grads, var_grads)
    k = M.exchange_count(state.mask, state.t, config.sparsity)
    old = state.mask
    state.mask = M.exchange(old, np.abs(inv_grads["theta"]), routed.var_activation, k)
    changed = np.flatnonzero(old.bits != state.mask.bits)
    state.adam1.reset_coordinates("theta", changed)
    return k, source, changed


def evil_train(state: TrainState, config: TrainLoopConfig, batcher: Batcher, explore_batcher: Batcher,
               train_envs, test_env=None, objective=None):
    """Masked invariant learning from ``state.t`` up to ``t_total``.

    Returns ``(rows, exchanges, trace)``: metric rows, one record per mask
    exploration, and (when instrumented) the theta coordinates written each step.
    """
    objective = config.objective if objective is None else objective
    if state.mask is None:
        raise ContractError("evil_train needs an initialized mask (run pretrain first)")
    if objective.kind == "dro" and state.weights is None:
        state.weights = uniform_weights(len(train_envs))
    sp = config.sparsity
    rows, exchanges, trace = [], [], []
    last_k = 0
    while state.t < sp.t_total:
        t = state.t
        xs, ys = batcher()
        binding = DualOptimizerBinding.from_mask(state.mask)
        active = {"theta": binding.inv_owner}
        before = state.params["theta"].copy() if config.instrument else None
        train_g = config.variant != "rigl_ablation"
        lvar, var_grads = var_loss_grad(state, xs, with_theta=False) if train_g else (float("nan"), {})
        if config.sam is not None:
            keep = {"theta": state.keep()}
            fn = _sam_closure(state, objective, xs, ys, keep=state.keep())
            params, state.adam1, info = sam_step(fn, _inv_params(state), keep, config.sam, state.adam1, active)
            routed = dual_route(binding, info.grads, var_grads)
            loss = info.loss
        else:
            res, inv_grads = inv_loss_grad(state, objective, xs, ys)
            if res.weights is not None:
                state.weights = res.weights
            routed = dual_route(binding, inv_grads, var_grads)
            params, state.adam1 = adam_step(state.adam1, _inv_params(state), routed.adam1, active)
            loss = res.loss.item()
        _check_finite(loss, t, "invariant loss")
        state.params.update(params)
        # optimizer 2 descends the domain loss on head g only; theta is read, never written
        if train_g:
            gparams, state.adam2 = adam_step(state.adam2, {k: state.params[k] for k in routed.adam2}, routed.adam2)
            state.params.update(gparams)
        if config.instrument:
            trace.append({"t": t, "updated": np.flatnonzero(state.params["theta"] != before),
                          "kept": state.mask.inv_indices()})
        if t > sp.t_pre and t % sp.delta_t == 0:
            ex, ey = explore_batcher()
            last_k, source, changed = _explore(state, config, objective, ex, ey)
            exchanges.append({"t": t, "k": last_k, "source": source, "changed": changed})
        state.t += 1
        if state.t % config.log_every == 0 or state.t == sp.t_total:
            rows.append(_row(state, config, loss, lvar, last_k, train_envs, test_env))
    return rows, exchanges, trace


def dense_train(state: TrainState, config: TrainLoopConfig, batcher: Batcher, train_envs, test_env=None):
    objective = config.objective
    if objective.kind == "dro" and state.weights is None:
        state.weights = uniform_weights(len(train_envs))
    rows = []
    while state.t < config.t_total:
        xs, ys = batcher()
        loss = _dense_step(state, config, objective, xs, ys)
        _check_finite(loss, state.t, "training loss")
        state.t += 1
        if state.t % config.log_every == 0 or state.t == config.t_total:
            rows.append(_row(state, config, loss, float("nan"), 0, train_envs, test_env))
    return rows


def _row(state, config, loss, lvar, k, train_envs, test_env):
    stats = [env_stats(state, e) for e in train_envs]
    n = sum(e.n for e in train_envs)
    row = {
        "iteration": state.t,
        "train_loss": float(loss),
        "var_loss": float(lvar),
        "env_losses": [s[1] for s in stats],
        "train_acc": sum(s[0] * e.n for s, e in zip(stats, train_envs)) / n,
        "ood_acc": eval_accuracy(state, test_env) if test_env is not None else float("nan"),
        "exchange_k": int(k),
        "kept": state.mask.kept if state.mask is not None else state.params["theta"].size,
        "v_inv": float("nan"),
        "v_var": float("nan"),
        "sharpness": float("nan"),
    }
    every = config.diagnostics_every
    if every and (state.t % every == 0 or state.t == config.t_total) and len(train_envs) > 1:
        rep = gradient_variance_of(state, train_envs)
        row["v_inv"], row["v_var"] = rep.v_inv, rep.v_var
        if config.sam is not None:
            masked = config.sam.masked and state.mask is not None
            row["sharpness"] = final_sharpness(state, train_envs, config.sam.rho, masked).sharpness
    return row


def _problem_shape(train_envs, n_classes):
    if n_classes is None:
        n_classes = int(max(int(e.labels.max()) for e in train_envs if e.n) + 1)
        n_classes = max(n_classes, 2)
    return train_envs[0].n_features, n_classes


def _finish(config, state, batcher, train_envs, test_env) -> RunResult:
    """Everything after the shared dense prefix of ``t_pre`` steps."""
    test_acc = None
    if not config.sparse:
        rows = dense_train(state, config, batcher, train_envs, test_env)
        if test_env is not None:
            test_acc = eval_accuracy(state, test_env)
        return RunResult(config, state, rows, pooled_accuracy(state, train_envs), test_acc)
    explore = Batcher(train_envs, config.batch_size, config.seed, stream=3)
    state.mask = _init_mask(state, config, batcher)
    initial = state.mask
    rows, exchanges, trace = evil_train(state, config, batcher, explore, train_envs, test_env)
    if test_env is not None:
        test_acc = eval_accuracy(state, test_env)
    return RunResult(config, state, rows, pooled_accuracy(state, train_envs), test_acc, exchanges, trace, initial)


def run_variant(config: TrainLoopConfig, train_envs, test_env=None, n_classes=None) -> RunResult:
    """Run one configured variant end to end on the given environments."""
    return run_variants([config], train_envs, test_env, n_classes)[0]


def _prefix_key(config: TrainLoopConfig):
    """Configs with equal keys share their first ``t_pre`` steps exactly."""
    if not config.sparse and (config.objective.kind != "erm" or config.sam is not None):
        return None
    return (config.seed, config.batch_size, config.widths, config.activation, config.lr, config.sparsity.t_pre)


def run_variants(configs, train_envs, test_env=None, n_classes=None) -> list[RunResult]:
    """Run several configs, computing each shared dense-ERM pre-training prefix once.

    Sparse variants pre-train with dense ERM; a dense ERM baseline without SAM
    takes the same steps on the same batches, so all of them can fork from one
    pre-trained state. Results are bit-identical to separate runs.
    """
    for config in configs:
        if config.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {config.variant!r}")
    n_in, n_classes = _problem_shape(train_envs, n_classes)
    cache = {}
    out = []
    for config in configs:
        key = _prefix_key(config)
        if key is not None and key in cache:
            state, batcher = copy.deepcopy(cache[key])
        else:
            state = new_state(config, n_in, n_classes, len(train_envs))
            batcher = Batcher(train_envs, config.batch_size, config.seed, stream=2)
            if config.sparse or key is not None:
                _pretrain_steps(state, config, batcher, config.sparsity.t_pre)
                if key is not None:
                    cache[key] = copy.deepcopy((state, batcher))
        out.append(_finish(config, state, batcher, train_envs, test_env))
    return out


# ------------------------------------------------------------ checkpoints

CKPT_MAGIC = b"EVILCKPT"
CKPT_VERSION = 1


def config_hash(config) -> str:
    blob = json.dumps(_jsonable(asdict(config)), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def save_checkpoint(path, state: TrainState, config: TrainLoopConfig, metrics: dict | None = None):
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    for tag, opt in (("adam1", state.adam1), ("adam2", state.adam2)):
        for k in opt.m:
            arrays[f"{tag}/m/{k}"] = opt.m[k]
            arrays[f"{tag}/v/{k}"] = opt.v[k]
    if state.weights is not None:
        arrays["dro/weights"] = state.weights
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    mask_blob = M.mask_to_bytes(state.mask) if state.mask is not None else b""
    header = {
        "config": _jsonable(asdict(config)),
        "config_hash": config_hash(config),
        "arch": _jsonable(asdict(state.arch)),
        "t": state.t,
        "adam": {tag: {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "t": o.t}
                 for tag, o in (("adam1", state.adam1), ("adam2", state.adam2))},
        "arrays": index,
        "mask_nbytes": len(mask_blob),
        "metrics": _jsonable(metrics or {}),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(raw)))
        fh.write(raw)
        fh.write(mask_blob)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise IngestionError(f"{path}: not a checkpoint (magic {buf[:8]!r})", offset=0)
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != CKPT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {version}", offset=8)
    pos = 20
    header = json.loads(buf[pos:pos + hlen])
    pos += hlen
    mask = None
    if header["mask_nbytes"]:
        mask = M.mask_from_bytes(buf[pos:pos + header["mask_nbytes"]])
    pos += header["mask_nbytes"]
    arrays = {}
    for entry in header["arrays"]:
        start = pos + entry["offset"]
        arrays[entry["name"]] = np.frombuffer(buf[start:start + entry["nbytes"]], dtype="<f8").reshape(entry["shape"]).copy()
    a = header["arch"]
    arch = Architecture(a["n_in"], tuple(a["widths"]), a["n_classes"], a["n_domains"], a["activation"])
    params = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("param/")}
    opts = {}
    for tag in ("adam1", "adam2"):
        h = header["adam"][tag]
        opt = AdamState(h["lr"], h["beta1"], h["beta2"], h["eps"], h["t"])
        for k, v in arrays.items():
            parts = k.split("/")
            if parts[0] == tag:
                getattr(opt, parts[1])[parts[2]] = v
        opts[tag] = opt
    state = TrainState(arch, params, opts["adam1"], opts["adam2"], mask, arrays.get("dro/weights"), header["t"])
    return state, header
