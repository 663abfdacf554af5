"""UNet-lite backbone with one generalist head and K projector+specialist pairs."""
from __future__ import annotations

import copy
import io
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1


def _he(rng, shape, dtype):
    fan_in = int(np.prod(shape[:-1]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class CGSModel:
    """Shared encoder-decoder, a (K+1)-way general head and K three-way specialists.

    Parameters live in ``self.params`` (name -> leaf Tensor), batch-norm
    running statistics in ``self.buffers`` (name -> ndarray). Names are
    prefixed ``backbone.``, ``general.``, ``proj{k}.`` and ``spec{k}.``
    with ``k`` running over 1..K.
    """

    def __init__(self, K, input_channels=1, base_channels=8, depth=3,
                 projector_depth=1, convs_per_block=2, seed=0,
                 dtype=np.float32, specialists=True):
        if K < 3:
            raise ValueError(f"K must be >= 3, got {K}")
        if depth < 2:
            raise ValueError(f"depth must be >= 2, got {depth}")
        if min(input_channels, base_channels, convs_per_block) < 1 or projector_depth < 0:
            raise ValueError("channel counts and block sizes must be positive")
        self.K = int(K)
        self.input_channels = int(input_channels)
        self.base_channels = int(base_channels)
        self.depth = int(depth)
        self.projector_depth = int(projector_depth)
        self.convs_per_block = int(convs_per_block)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.has_specialists = bool(specialists)
        self.backbone_calls = 0

        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        widths = self.widths
        cin = self.input_channels
        for lvl, ch in enumerate(widths):
            self._block(rng, f"backbone.enc{lvl}", cin, ch)
            cin = ch
        for lvl in range(depth - 2, -1, -1):
            self._block(rng, f"backbone.dec{lvl}", widths[lvl + 1] + widths[lvl], widths[lvl])
        c0 = widths[0]
        self._conv(rng, "general.conv", 1, c0, K + 1, bias=True)
        # specialists are always drawn so that general-path init is independent of them
        for k in range(1, K + 1):
            for d in range(self.projector_depth):
                self._conv(rng, f"proj{k}.conv{d}", 1, c0, c0)
                self._bn(f"proj{k}.bn{d}", c0)
            self._conv(rng, f"spec{k}.conv", 1, c0, 3, bias=True)
        if not self.has_specialists:
            self._drop_specialists()

    # -- construction helpers -------------------------------------------------
    @property
    def widths(self):
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    def _conv(self, rng, name, ksize, cin, cout, bias=False):
        self.params[name + ".w"] = Tensor(_he(rng, (ksize, ksize, cin, cout), self.dtype),
                                          requires_grad=True, name=name + ".w")
        if bias:
            self.params[name + ".b"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True,
                                              name=name + ".b")

    def _bn(self, name, ch):
        self.params[name + ".gamma"] = Tensor(np.ones(ch, self.dtype), requires_grad=True,
                                              name=name + ".gamma")
        self.params[name + ".beta"] = Tensor(np.zeros(ch, self.dtype), requires_grad=True,
                                             name=name + ".beta")
        self.buffers[name + ".mean"] = np.zeros(ch, self.dtype)
        self.buffers[name + ".var"] = np.ones(ch, self.dtype)

    def _block(self, rng, name, cin, cout):
        for i in range(self.convs_per_block):
            self._conv(rng, f"{name}.conv{i}", 3, cin if i == 0 else cout, cout)
            self._bn(f"{name}.bn{i}", cout)

    def _drop_specialists(self):
        for table in (self.params, self.buffers):
            for name in [n for n in table if n.startswith(("proj", "spec"))]:
                del table[name]
        self.has_specialists = False

    # -- forward ----------------------------------------------------------------
    def _apply_bn(self, name, x, training):
        return ad.batch_norm(x, self.params[name + ".gamma"], self.params[name + ".beta"],
                             self.buffers[name + ".mean"], self.buffers[name + ".var"],
                             training)

    def _run_block(self, name, x, training):
        for i in range(self.convs_per_block):
            x = ad.conv2d(x, self.params[f"{name}.conv{i}.w"], padding=1)
            x = ad.relu(self._apply_bn(f"{name}.bn{i}", x, training))
        return x

    def check_input(self, x):
        if x.ndim != 4 or x.shape[-1] != self.input_channels:
            raise ad.ShapeError(f"expected (N,H,W,{self.input_channels}) input, got {x.shape}")
        step = 2 ** (self.depth - 1)
        if x.shape[1] % step or x.shape[2] % step:
            raise ad.ShapeError(f"spatial extents {x.shape[1:3]} not divisible by {step}")

    def features(self, x, mode="train"):
        """Shared backbone features (N, H, W, base_channels)."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, self.dtype))
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        self.check_input(x)
        training = _training(mode)
        self.backbone_calls += 1
        skips = []
        for lvl in range(self.depth):
            x = self._run_block(f"backbone.enc{lvl}", x, training)
            if lvl < self.depth - 1:
                skips.append(x)
                x = ad.maxpool2d(x)
        for lvl in range(self.depth - 2, -1, -1):
            x = ad.concat([ad.upsample2x(x), skips[lvl]], axis=-1)
            x = self._run_block(f"backbone.dec{lvl}", x, training)
        return x

    def general_logits(self, feats):
        return ad.conv2d(feats, self.params["general.conv.w"], self.params["general.conv.b"])

    def specialist_logits(self, feats, mode="train"):
        if not self.has_specialists:
            raise RuntimeError("model was built without specialist heads")
        training = _training(mode)
        out = []
        for k in range(1, self.K + 1):
            h = feats
            for d in range(self.projector_depth):
                h = ad.conv2d(h, self.params[f"proj{k}.conv{d}.w"])
                h = ad.relu(self._apply_bn(f"proj{k}.bn{d}", h, training))
            out.append(ad.conv2d(h, self.params[f"spec{k}.conv.w"], self.params[f"spec{k}.conv.b"]))
        return out

    def forward(self, x, mode="train", specialists=True):
        """One backbone pass; returns (P, [Q_1..Q_K]) probability maps.

        The specialist list is ``None`` when ``specialists`` is false or the
        model carries no specialist heads.
        """
        feats = self.features(x, mode)
        p = ad.softmax(self.general_logits(feats))
        if not (specialists and self.has_specialists):
            return p, None
        return p, [ad.softmax(q) for q in self.specialist_logits(feats, mode)]

    # -- parameter management ---------------------------------------------------
    def parameters(self):
        return list(self.params.values())

    def named_parameters(self, prefix=None):
        return {n: t for n, t in self.params.items() if prefix is None or n.startswith(prefix)}

    def specialist_parameters(self):
        return {n: t for n, t in self.params.items() if n.startswith(("proj", "spec"))}

    def inference_parameter_count(self):
        """Scalars used by the deployment path (backbone + general head)."""
        return sum(t.size for n, t in self.params.items() if n.startswith(("backbone.", "general.")))

    def parameter_count(self):
        return sum(t.size for t in self.params.values())

    def zero_grad(self):
        ad.zero_grad(self.params.values())

    def state_dict(self):
        state = {f"param/{n}": t.data.copy() for n, t in self.params.items()}
        state.update({f"buffer/{n}": b.copy() for n, b in self.buffers.items()})
        return state

    def load_state_dict(self, state):
        for n, t in self.params.items():
            arr = state[f"param/{n}"]
            if arr.shape != t.shape:
                raise ad.ShapeError(f"{n}: checkpoint shape {arr.shape} != model {t.shape}")
            t.data = np.array(arr, dtype=self.dtype, copy=True)
        for n in self.buffers:
            self.buffers[n] = np.array(state[f"buffer/{n}"], dtype=self.dtype, copy=True)

    def config(self):
        return dict(K=self.K, input_channels=self.input_channels,
                    base_channels=self.base_channels, depth=self.depth,
                    projector_depth=self.projector_depth,
                    convs_per_block=self.convs_per_block, seed=self.seed,
                    dtype=self.dtype.name, specialists=self.has_specialists)

    def copy(self):
        other = copy.copy(self)
        other.params = {n: Tensor(t.data.copy(), requires_grad=True, name=n)
                        for n, t in self.params.items()}
        other.buffers = {n: b.copy() for n, b in self.buffers.items()}
        other.backbone_calls = 0
        return other

    def generalist_only(self):
        """Deployment copy with projectors and specialist heads removed."""
        other = self.copy()
        other._drop_specialists()
        return other


def _training(mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def build_model(K, input_channels=1, base_channels=8, depth=3, seed=0, **kwargs):
    return CGSModel(K, input_channels=input_channels, base_channels=base_channels,
                    depth=depth, seed=seed, **kwargs)


def forward_general(model, image, mode="eval", feats=None):
    """Generalist probability map (N, H, W, K+1)."""
    if feats is None:
        feats = model.features(image, mode)
    return ad.softmax(model.general_logits(feats))


def forward_specialists(model, image, mode="eval", feats=None):
    """K specialist probability maps, each (N, H, W, 3); one shared backbone pass."""
    if feats is None:
        feats = model.features(image, mode)
    return [ad.softmax(q) for q in model.specialist_logits(feats, mode)]


@dataclass
class TeacherStudentPair:
    student: CGSModel
    teacher: CGSModel

    @classmethod
    def from_model(cls, model):
        teacher = model.copy()
        for t in teacher.params.values():
            t.requires_grad = False
        return cls(student=model, teacher=teacher)


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, model, meta=None):
    """Write a versioned ``.npz`` holding the model config, params and buffers."""
    header = {"version": CHECKPOINT_VERSION, "model": model.config(), "meta": meta or {}}
    arrays = model.state_dict()
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, meta)`` from a checkpoint written by :func:`save_checkpoint`."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        state = {k: z[k] for k in z.files if k != "__header__"}
    cfg = dict(header["model"])
    cfg["dtype"] = np.dtype(cfg["dtype"])
    model = CGSModel(**cfg)
    model.load_state_dict(state)
    return model, header["meta"]
