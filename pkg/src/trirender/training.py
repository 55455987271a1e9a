"""Training harness: loss, schedule, optimizer, loop, checkpoints, datasets.

The loss operates in log(1 + radiance) space with a small multi-scale
image-gradient term on tone-mapped images standing in for a perceptual
metric. Optimization is AdamW with linear warmup and cosine decay.

Determinism contract: with a fixed seed and the default single-threaded
batch reduction, training trajectories are bitwise reproducible, and a
run resumed from a checkpoint continues the original trajectory exactly.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import shutil
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, GenerationError, NumericalError, ValidationError
from .generator import GenConfig, random_rotation, scene_and_views
from .hdr import HdrImage, psnr, read_pfm, write_pfm
from .model import (
    ModelConfig,
    ModelWeights,
    dpt_decode,
    embed_ray_bundles,
    render,
    scene_tokens,
    view_dependent_forward,
    view_independent_forward,
)
from .oracle import path_trace
from .scene import Scene, load_scene, save_scene, to_camera_space, transform_scene
from .tensor import Tensor, avgpool2x, clip, maximum
from .tokenizer import RopeTable, register_anchor

_LN2 = math.log(2.0)
_TONE_FLOOR = 1e-6  # keeps the tone-map log finite and its gradient bounded


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    warmup_steps: int = 200
    total_steps: int = 10000
    peak_lr: float = 5e-4
    l1_weight: float = 1.0
    perc_weight: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    resolution: tuple = (32, 32)
    max_triangles: int = 64
    augment: bool = False
    eval_every: int = 250
    checkpoint_every: int = 2000
    holdout_every: int = 8  # every k-th record held out; 0 disables the split
    target_psnr: float = 0.0  # > 0 enables early stopping

    def __post_init__(self):
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ValidationError("steps must be positive")
        if self.warmup_steps > self.total_steps:
            raise ValidationError(
                f"warmup_steps {self.warmup_steps} exceeds total_steps {self.total_steps}"
            )
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if self.peak_lr <= 0:
            raise ValidationError("peak_lr must be positive")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ValidationError("eval/checkpoint intervals must be positive")
        if self.holdout_every < 0:
            raise ValidationError("holdout_every must be non-negative")
        object.__setattr__(self, "resolution", (int(self.resolution[0]), int(self.resolution[1])))

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["resolution"] = list(self.resolution)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown TrainConfig fields: {sorted(extra)}")
        kwargs = dict(doc)
        if "resolution" in kwargs:
            kwargs["resolution"] = tuple(kwargs["resolution"])
        return cls(**kwargs)


# -- loss ---------------------------------------------------------------------------


def _tone_map_t(radiance: Tensor) -> Tensor:
    """Differentiable clamp(log2(radiance), 0, 1) with a small floor."""
    return clip(maximum(radiance, _TONE_FLOOR).log() * (1.0 / _LN2), 0.0, 1.0)


def _gradient_l1(a: Tensor, b: Tensor) -> Tensor:
    dxa, dxb = a[:, 1:] - a[:, :-1], b[:, 1:] - b[:, :-1]
    dya, dyb = a[1:, :] - a[:-1, :], b[1:, :] - b[:-1, :]
    return (dxa - dxb).absolute().mean() + (dya - dyb).absolute().mean()


def loss_terms(pred_log: Tensor, ref: HdrImage, weights=(1.0, 0.05)):
    """Loss on a log-encoded prediction tensor; differentiable wrt pred_log.

    Returns (total Tensor, l1 value, perceptual value).
    """
    if pred_log.shape != ref.pixels.shape:
        raise ValidationError(f"prediction {pred_log.shape} vs reference {ref.pixels.shape}")
    l1_w, perc_w = float(weights[0]), float(weights[1])
    dtype = pred_log.data.dtype
    ref_log = Tensor(ref.log_encoded(), dtype=dtype)
    l1 = (pred_log - ref_log).absolute().mean()
    total = l1 * l1_w
    perc_value = 0.0
    if perc_w != 0.0:
        # identical op pipeline on both sides so equal images give exactly zero
        p = _tone_map_t(pred_log.expm1())
        r = _tone_map_t(ref_log.expm1())
        perc = None
        levels = 0
        for _ in range(3):
            term = _gradient_l1(p, r)
            perc = term if perc is None else perc + term
            levels += 1
            h, w = p.shape[:2]
            if h % 2 or w % 2 or h < 4 or w < 4:
                break
            p, r = avgpool2x(p), avgpool2x(r)
        perc = perc * (1.0 / levels)
        perc_value = float(perc.data)
        total = total + perc * perc_w
    return total, float(l1.data), perc_value


def loss_fn(pred: HdrImage, ref: HdrImage, weights=(1.0, 0.05)):
    """Loss between two images: (total, l1 term, perceptual term) as floats."""
    total, l1, perc = loss_terms(Tensor(pred.log_encoded()), ref, weights)
    return float(total.data), l1, perc


# -- schedule and optimizer ------------------------------------------------------------


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear 0 -> peak over warmup, then cosine decay to 0 at total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise ValidationError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return 0.0
    progress = (step - cfg.warmup_steps) / span
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over a ModelWeights table."""

    def __init__(self, weights: ModelWeights, cfg: TrainConfig):
        self.beta1, self.beta2 = cfg.beta1, cfg.beta2
        self.weight_decay = cfg.weight_decay
        self.eps = 1e-8
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in weights.items()}

    def step(self, weights: ModelWeights, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in weights.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= (lr * (update + self.weight_decay * p.data)).astype(p.data.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = state["m"][k].astype(self.m[k].dtype)
            self.v[k] = state["v"][k].astype(self.v[k].dtype)


def clip_gradients(weights: ModelWeights, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in weights.items():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for _, p in weights.items():
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- checkpoints -----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"TRCKPT01"
_CHECKPOINT_VERSION = 1


def _model_cfg_json(cfg: ModelConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["frequencies"] = list(cfg.frequencies)
    return doc


def _model_cfg_from_json(doc: dict) -> ModelConfig:
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    extra = set(doc) - known
    if extra:
        raise CheckpointError(f"unknown ModelConfig fields: {sorted(extra)}")
    kwargs = dict(doc)
    if "frequencies" in kwargs:
        kwargs["frequencies"] = tuple(kwargs["frequencies"])
    return ModelConfig(**kwargs)


def save_checkpoint(
    path: str,
    weights: ModelWeights,
    step: int = 0,
    optimizer: dict | None = None,
    rng_state: dict | None = None,
    train_config: TrainConfig | None = None,
) -> None:
    """Binary container: magic, u64 header length, canonical JSON, raw f32 tensors."""
    tensors = []
    blobs = []
    for name, p in weights.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(p.data.shape), "crc32": zlib.crc32(raw)})
        blobs.append(raw)
    opt_tensors = []
    opt_t = 0
    if optimizer is not None:
        opt_t = int(optimizer["t"])
        for kind in ("m", "v"):
            for name in optimizer[kind]:
                raw = np.ascontiguousarray(optimizer[kind][name], dtype="<f4").tobytes()
                opt_tensors.append(
                    {
                        "name": f"{kind}.{name}",
                        "shape": list(optimizer[kind][name].shape),
                        "crc32": zlib.crc32(raw),
                    }
                )
                blobs.append(raw)
    header = {
        "version": _CHECKPOINT_VERSION,
        "model_config": _model_cfg_json(weights.cfg),
        "train_config": train_config.to_json() if train_config else None,
        "step": int(step),
        "param_count": int(weights.param_count),
        "tensors": tensors,
        "opt_tensors": opt_tensors,
        "opt_t": opt_t,
        "rng_state": rng_state,
    }
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(encoded).to_bytes(8, "little"))
        fh.write(encoded)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    weights: ModelWeights
    step: int
    optimizer: dict | None
    rng_state: dict | None
    train_config: dict | None


def load_checkpoint(path: str, expected_config: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = (int.from_bytes(fh.read(8), "little"),)
        try:
            header = json.loads(fh.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt header: {e}") from e
        if header.get("version") != _CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: version {header.get('version')} != {_CHECKPOINT_VERSION}"
            )
        cfg = _model_cfg_from_json(header["model_config"])
        if expected_config is not None and cfg != expected_config:
            for f in dataclasses.fields(ModelConfig):
                a, b = getattr(cfg, f.name), getattr(expected_config, f.name)
                if a != b:
                    raise CheckpointError(
                        f"{path}: config mismatch on {f.name}: checkpoint {a} vs expected {b}"
                    )

        def read_table(table):
            out = {}
            for entry in table:
                n = int(np.prod(entry["shape"])) if entry["shape"] else 1
                raw = fh.read(4 * n)
                if len(raw) != 4 * n or zlib.crc32(raw) != entry["crc32"]:
                    raise CheckpointError(f"{path}: checksum failure on {entry['name']}")
                out[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
            return out

        arrays = read_table(header["tensors"])
        opt_arrays = read_table(header["opt_tensors"])

    tensors = {k: Tensor(v, requires_grad=True, dtype=v.dtype) for k, v in arrays.items()}
    weights = ModelWeights(cfg, tensors)
    if weights.param_count != header["param_count"]:
        raise CheckpointError(
            f"{path}: parameter count {weights.param_count} != header {header['param_count']}"
        )
    optimizer = None
    if header["opt_tensors"]:
        optimizer = {"t": header["opt_t"], "m": {}, "v": {}}
        for name, arr in opt_arrays.items():
            kind, pname = name.split(".", 1)
            optimizer[kind][pname] = arr
    return Checkpoint(weights, int(header["step"]), optimizer, header["rng_state"], header["train_config"])


# -- dataset --------------------------------------------------------------------------


@dataclass
class DatasetRecord:
    scene: str
    image: str
    camera_index: int
    seed: int


def write_manifest(path: str, records) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {
                        "scene": r.scene,
                        "image": r.image,
                        "camera_index": r.camera_index,
                        "seed": r.seed,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    os.replace(tmp, path)


def read_manifest(path: str) -> list:
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}:{lineno}: invalid manifest line: {e}") from e
            records.append(
                DatasetRecord(
                    scene=os.path.join(base, doc["scene"]),
                    image=os.path.join(base, doc["image"]),
                    camera_index=int(doc["camera_index"]),
                    seed=int(doc["seed"]),
                )
            )
    if not records:
        raise ValidationError(f"{path}: empty manifest")
    return records


def _generate_one(args):
    out_dir, gen, base_seed, spp, max_depth, index = args
    scene_seed = (base_seed * 1_000_003 + index) % 2**63
    rng = np.random.Generator(np.random.Philox(scene_seed))
    try:
        scene, cameras = scene_and_views(rng, gen)
    except (GenerationError, ValidationError) as exc:
        raise type(exc)(f"scene {index}: {exc}") from None
    records = []
    for v, cam in enumerate(cameras):
        view = Scene(
            scene.vertices,
            scene.normals,
            scene.diffuse,
            scene.specular,
            scene.roughness,
            scene.emission,
            scene.flat,
            cam,
        )
        scene_name = f"scene_{index:05d}_view{v}.json"
        image_name = f"scene_{index:05d}_view{v}.pfm"
        save_scene(view, os.path.join(out_dir, scene_name))
        img = path_trace(view, spp, seed=(scene_seed * 16 + v) % 2**63, max_depth=max_depth)
        write_pfm(img, os.path.join(out_dir, image_name))
        records.append(DatasetRecord(scene_name, image_name, v, scene_seed))
    return records


def generate_dataset(
    out_dir: str,
    gen: GenConfig,
    count: int,
    seed: int,
    spp: int = 1024,
    max_depth: int = 8,
    threads: int = 1,
) -> str:
    """Sample scenes, path-trace each view, write a JSON-lines manifest.

    Per-scene work is independent and seeded by scene index, so results
    are byte-identical for any thread count.
    """
    if count < 1:
        raise ValidationError("count must be at least 1")
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(out_dir, gen, seed, spp, max_depth, i) for i in range(count)]
    if threads > 1:
        from multiprocessing import Pool

        with Pool(threads) as pool:
            grouped = pool.map(_generate_one, jobs)
    else:
        grouped = [_generate_one(j) for j in jobs]
    records = [r for group in grouped for r in group]
    manifest = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(manifest, records)
    return manifest


# -- training loop ----------------------------------------------------------------------


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list  # per-step dicts: step, lr, loss_total, loss_l1, loss_perc
    metrics: list  # per-interval dicts, adds psnr_holdout
    stopped_early: bool


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=[seed % 2**64, epoch]))
    return gen.permutation(n)


class _Example:
    def __init__(self, record: DatasetRecord, cfg: TrainConfig):
        self.record = record
        self.scene = load_scene(record.scene, cfg.max_triangles)
        self.ref = read_pfm(record.image)
        w, h = cfg.resolution
        if (self.ref.width, self.ref.height) != (w, h):
            raise ValidationError(
                f"{record.image}: resolution {self.ref.width}x{self.ref.height} != {w}x{h}"
            )
        if self.scene.camera.resolution != (w, h):
            raise ValidationError(f"{record.scene}: camera resolution != {w}x{h}")


def _render_batch_loss(examples, weights: ModelWeights, cfg: TrainConfig, rng):
    """Mean loss over a batch; views of one scene share the world-space pass."""
    mcfg = weights.cfg
    dtype = weights["registers"].data.dtype
    groups: dict = {}
    for ex in examples:
        groups.setdefault(ex.record.seed, []).append(ex)

    total = None
    l1_sum = 0.0
    perc_sum = 0.0
    inv = 1.0 / len(examples)
    for group in groups.values():
        scenes = [ex.scene for ex in group]
        if cfg.augment:
            r = random_rotation(rng)
            scenes = [transform_scene(s, r, np.zeros(3)) for s in scenes]
        tokens, anchors_world = scene_tokens(scenes[0], weights)
        rope_world = RopeTable.for_anchors(
            anchors_world, mcfg.head_dim, mcfg.rope_pairs, mcfg.frequencies, dtype=dtype
        )
        tri_out = view_independent_forward(tokens, rope_world, weights)
        for ex, scene in zip(group, scenes):
            cam_scene = to_camera_space(scene)
            anchors_cam = np.concatenate(
                [
                    cam_scene.anchors(),
                    np.tile(register_anchor(cam_scene), (mcfg.registers, 1)),
                ],
                axis=0,
            )
            rope_cam = RopeTable.for_anchors(
                anchors_cam, mcfg.head_dim, mcfg.rope_pairs, mcfg.frequencies, dtype=dtype
            )
            rays = embed_ray_bundles(
                scene.camera, weights["embed.ray.w"], weights["embed.ray.gain"]
            )
            stack = view_dependent_forward(rays, tri_out, rope_cam, weights)
            w, h = scene.camera.resolution
            y = dpt_decode(stack, (h // mcfg.patch, w // mcfg.patch), weights)
            loss, l1, perc = loss_terms(y, ex.ref, (cfg.l1_weight, cfg.perc_weight))
            total = loss * inv if total is None else total + loss * inv
            l1_sum += l1 * inv
            perc_sum += perc * inv
    return total, l1_sum, perc_sum


def _holdout_psnr(weights: ModelWeights, holdout) -> float:
    values = [psnr(render(ex.scene, weights), ex.ref) for ex in holdout]
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else float("inf")


def train_loop(
    weights: ModelWeights,
    records,
    cfg: TrainConfig,
    out_dir: str | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Optimize weights on the dataset; returns the final weights and logs.

    Writes ``metrics.csv`` and rolling ``checkpoint.bin`` under out_dir
    when given. ``resume`` continues a previous run's trajectory exactly.
    """
    examples = [_Example(r, cfg) for r in records]
    if cfg.holdout_every and len(examples) > cfg.holdout_every:
        holdout = examples[cfg.holdout_every - 1 :: cfg.holdout_every]
        train = [ex for i, ex in enumerate(examples) if (i + 1) % cfg.holdout_every]
    else:
        holdout = examples
        train = examples

    rng = np.random.Generator(np.random.Philox(key=[cfg.seed % 2**64, 0xA11]))
    opt = AdamW(weights, cfg)
    step = 0
    if resume is not None:
        step = resume.step
        if resume.optimizer is not None:
            opt.load_state(resume.optimizer)
        if resume.rng_state is not None:
            rng.bit_generator.state = _decode_rng_state(resume.rng_state)

    metrics_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
    if metrics_path and (resume is None or not os.path.exists(metrics_path)):
        with open(metrics_path, "w") as fh:
            fh.write("step,lr,loss_total,loss_l1,loss_perc,psnr_holdout\n")

    history = []
    metrics = []
    stopped = False
    n = len(train)
    while step < cfg.total_steps:
        base = step * cfg.batch_size
        batch = []
        for j in range(cfg.batch_size):
            k = base + j
            perm = _epoch_permutation(cfg.seed, k // n, n)
            batch.append(train[int(perm[k % n])])

        weights.zero_grad()
        loss, l1, perc = _render_batch_loss(batch, weights, cfg, rng)
        loss_value = float(loss.data)
        if not math.isfinite(loss_value):
            ids = [records.index(ex.record) for ex in batch]
            raise NumericalError(
                f"non-finite loss {loss_value} at step {step}; batch records {ids}"
            )
        loss.backward()
        clip_gradients(weights, cfg.clip_norm)
        lr = lr_schedule(step, cfg)
        opt.step(weights, lr)
        step += 1
        history.append(
            {"step": step, "lr": lr, "loss_total": loss_value, "loss_l1": l1, "loss_perc": perc}
        )

        at_interval = step % cfg.eval_every == 0 or step == cfg.total_steps
        if at_interval:
            hold = _holdout_psnr(weights, holdout)
            row = dict(history[-1], psnr_holdout=hold)
            metrics.append(row)
            if metrics_path:
                with open(metrics_path, "a") as fh:
                    fh.write(
                        f"{row['step']},{row['lr']:.8e},{row['loss_total']:.8e},"
                        f"{row['loss_l1']:.8e},{row['loss_perc']:.8e},{hold:.6f}\n"
                    )
            if cfg.target_psnr > 0 and hold >= cfg.target_psnr:
                stopped = True
        if out_dir and (step % cfg.checkpoint_every == 0 or step == cfg.total_steps or stopped):
            stamped = os.path.join(out_dir, f"checkpoint_{step:06d}.bin")
            save_checkpoint(
                stamped,
                weights,
                step=step,
                optimizer=opt.state(),
                rng_state=_encode_rng_state(rng.bit_generator.state),
                train_config=cfg,
            )
            shutil.copyfile(stamped, os.path.join(out_dir, "checkpoint.bin"))
        if stopped:
            break
    return TrainResult(weights, history, metrics, stopped)


def _encode_rng_state(state: dict) -> dict:
    def enc(x):
        if isinstance(x, dict):
            return {k: enc(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__array__": x.tolist(), "dtype": str(x.dtype)}
        if isinstance(x, (np.integer,)):
            return int(x)
        return x

    return enc(state)


def _decode_rng_state(state: dict):
    def dec(x):
        if isinstance(x, dict):
            if "__array__" in x:
                return np.array(x["__array__"], dtype=x["dtype"])
            return {k: dec(v) for k, v in x.items()}
        return x

    return dec(state)
