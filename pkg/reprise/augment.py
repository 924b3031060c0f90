"""
Data augmentation: a random (P, Q) policy for training and finite transform groups
for exact orbit averaging.

Magnitudes run from 0 to 30. Magnitude 0 leaves every op a no-op; image outputs are
clamped to [0, 1]. Vector ops assume features on the scale of unit-variance classes:
vector noise reaches a standard deviation of 3 at full magnitude.
"""

import numpy as np
import sciris as sc
from scipy import ndimage
import reprise as rp

__all__ = [
    "MAX_MAGNITUDE",
    "AUG_TARGETS",
    "TransformOp",
    "IMAGE_OPS",
    "VECTOR_OPS",
    "make_ops",
    "AugPolicy",
    "rand_augment_batch",
    "FiniteGroup",
    "trivial_group",
    "flip_group",
    "rotation_group",
    "group_orbit_losses",
]

MAX_MAGNITUDE = 30
AUG_TARGETS = ["none", "memory_only", "incoming_only", "both"]
DEFAULT_P = 1
DEFAULT_Q = 14


class TransformOp(sc.prettyobj):
    """
    A named feature transform with a magnitude.

    Args:
        name (str): op name
        domain (str): "image" (2-D features, needs shape metadata) or "vector"
        fn (callable): fn(x, level, rng) -> transformed x, with level = magnitude/30 in (0, 1]
    """

    def __init__(self, name, domain, fn):
        self.name = name
        self.domain = domain
        self.fn = fn
        return

    def apply(self, features, magnitude, rng=None, shape=None):
        """Apply the op to flat features; returns a new flat array of the same length"""
        if not 0 <= magnitude <= MAX_MAGNITUDE:
            errormsg = f"Magnitude must be in [0, {MAX_MAGNITUDE}], not {magnitude}"
            raise rp.ContractError(errormsg)
        features = np.asarray(features, dtype=np.float64)
        if self.domain == "image":
            if shape is None:
                errormsg = f"Image op {self.name!r} applied to features without image shape"
                raise rp.ContractError(errormsg)
            x = features.reshape(shape)
        else:
            if shape is not None:
                errormsg = f"Vector op {self.name!r} applied to image data of shape {shape}"
                raise rp.ContractError(errormsg)
            x = features
        if magnitude == 0:
            return features.copy()

        out = self.fn(x, magnitude / MAX_MAGNITUDE, rp.make_rng(rng))
        if self.domain == "image":
            out = np.clip(out, 0.0, 1.0)
        return np.asarray(out, dtype=np.float64).ravel()


def _sign(rng):
    return 1.0 if rng.random() < 0.5 else -1.0


def _identity(x, level, rng):
    return x.copy()


def _hflip(x, level, rng):
    return x[:, ::-1].copy()


def _rotate(x, level, rng):
    angle = _sign(rng) * level * 30.0
    return ndimage.rotate(x, angle, reshape=False, order=0, mode="constant", cval=0.0)


def _translate(axis):
    def fn(x, level, rng):
        pixels = int(round(_sign(rng) * level * 0.3 * x.shape[axis]))
        offset = [0, 0]
        offset[axis] = pixels
        return ndimage.shift(x, offset, order=0, mode="constant", cval=0.0)

    return fn


def _brightness(x, level, rng):
    return x + _sign(rng) * level * 0.5


def _contrast(x, level, rng):
    mean = x.mean()
    return mean + (x - mean) * (1.0 + _sign(rng) * level * 0.9)


def _gaussian_noise(x, level, rng):
    return x + rng.normal(size=x.shape) * level * 0.3


def _cutout(x, level, rng):
    side = int(round(level * 0.4 * min(x.shape)))
    out = x.copy()
    if side > 0:
        row = int(rng.integers(0, x.shape[0]))
        col = int(rng.integers(0, x.shape[1]))
        r0, c0 = max(row - side // 2, 0), max(col - side // 2, 0)
        out[r0 : r0 + side, c0 : c0 + side] = 0.0
    return out


def _vector_noise(x, level, rng):
    return x + rng.normal(size=x.shape) * level * 3.0


def _feature_dropout(x, level, rng):
    rate = level * 0.3
    keep = rng.random(x.shape) >= rate
    return x * keep / (1.0 - rate)


def _global_scale(x, level, rng):
    return x * (1.0 + _sign(rng) * level * 0.5)


def _quarter_turns(k):
    def fn(x, level, rng):
        if x.shape[0] != x.shape[1]:
            errormsg = f"Quarter-turn rotations need square images, not {x.shape}"
            raise rp.ContractError(errormsg)
        return np.rot90(x, k).copy()

    return fn


IMAGE_OPS = {
    "identity": TransformOp("identity", "image", _identity),
    "horizontal_flip": TransformOp("horizontal_flip", "image", _hflip),
    "rotate": TransformOp("rotate", "image", _rotate),
    "translate_x": TransformOp("translate_x", "image", _translate(1)),
    "translate_y": TransformOp("translate_y", "image", _translate(0)),
    "brightness": TransformOp("brightness", "image", _brightness),
    "contrast": TransformOp("contrast", "image", _contrast),
    "gaussian_noise": TransformOp("gaussian_noise", "image", _gaussian_noise),
    "cutout": TransformOp("cutout", "image", _cutout),
}

VECTOR_OPS = {
    "identity": TransformOp("identity", "vector", _identity),
    "gaussian_noise": TransformOp("gaussian_noise", "vector", _vector_noise),
    "feature_dropout": TransformOp("feature_dropout", "vector", _feature_dropout),
    "global_scale": TransformOp("global_scale", "vector", _global_scale),
}


def make_ops(names=None, domain="vector"):
    """Look up ops by name in the registry of a domain (all ops of the domain by default)"""
    registry = dict(image=IMAGE_OPS, vector=VECTOR_OPS).get(domain)
    if registry is None:
        raise rp.ContractError(f"Augmentation domain must be 'image' or 'vector', not {domain!r}")
    names = sc.ifelse(names, list(registry.keys()))
    unknown = [name for name in sc.tolist(names) if name not in registry]
    if unknown:
        errormsg = f"Unknown {domain} ops {unknown}; available: {list(registry.keys())}"
        raise rp.ContractError(errormsg)
    return [registry[name] for name in sc.tolist(names)]


class AugPolicy(sc.prettyobj):
    """
    RandAugment-style policy: P distinct ops per sample, each at magnitude Q.

    Args:
        ops (list): TransformOps, all of one domain
        p (int): ops applied per sample, 1 <= p <= len(ops)
        q (float): magnitude in [0, 30]
        target (str): which part of the rehearsal batch is augmented: "none", "memory_only", "incoming_only" or "both"
    """

    def __init__(self, ops, p=None, q=None, target="both"):
        self.ops = list(ops)
        self.p = int(sc.ifelse(p, DEFAULT_P))
        self.q = sc.ifelse(q, DEFAULT_Q)
        self.target = target
        if not self.ops:
            raise rp.ContractError("An augmentation policy needs at least one op")
        domains = set(op.domain for op in self.ops)
        if len(domains) != 1:
            raise rp.ContractError(f"Ops of a policy must share one domain, got {sorted(domains)}")
        self.domain = domains.pop()
        self.check(self.p, self.q)
        if target not in AUG_TARGETS:
            raise rp.ContractError(f"Augmentation target must be one of {AUG_TARGETS}, not {target!r}")
        return

    @classmethod
    def from_names(cls, names=None, domain="vector", p=None, q=None, target="both"):
        return cls(make_ops(names, domain), p=p, q=q, target=target)

    @classmethod
    def disabled(cls, domain="vector"):
        return cls(make_ops(["identity"], domain), p=1, q=0, target="none")

    def check(self, p, q):
        """Validate a (P, Q) pair against this policy"""
        if not 1 <= p <= len(self.ops):
            errormsg = f"P must be in [1, {len(self.ops)}], not {p}"
            raise rp.ContractError(errormsg)
        if not 0 <= q <= MAX_MAGNITUDE:
            errormsg = f"Q must be in [0, {MAX_MAGNITUDE}], not {q}"
            raise rp.ContractError(errormsg)
        return

    def with_strength(self, p, q):
        """The same ops and target at another (P, Q); P is capped at the number of ops"""
        return AugPolicy(self.ops, p=min(int(p), len(self.ops)), q=q, target=self.target)

    def applies_to(self, part):
        """Whether the "memory" or "incoming" part of a rehearsal batch is augmented"""
        return self.target == "both" or self.target == f"{part}_only"


def rand_augment_batch(batch, policy, rng):
    """
    Augment each sample with P distinct ops drawn independently per sample.

    The input samples are not modified; new samples are returned.
    """
    out = []
    for sample in batch:
        is_image = sample.shape is not None
        if is_image != (policy.domain == "image"):
            kind = "image" if is_image else "vector"
            errormsg = f"A {policy.domain} augmentation policy cannot be applied to {kind} data"
            raise rp.ContractError(errormsg)
        features = sample.features
        for i in rng.choice(len(policy.ops), size=policy.p, replace=False):
            features = policy.ops[i].apply(features, policy.q, rng, shape=sample.shape)
        out.append(sample.copy(features=features))
    return out


class FiniteGroup(sc.prettyobj):
    """
    A finite group of transforms with the uniform distribution over its elements.

    Elements are TransformOps applied at full magnitude. Closure, identity and
    inverses are checked on a probe input whose entries are all distinct.

    Args:
        elements (list): the TransformOps
        shape (tuple): image shape the group acts on (None for vectors)
        name (str): label for reports
    """

    def __init__(self, elements, shape=None, name=None, validate=True):
        self.elements = list(elements)
        self.shape = None if shape is None else tuple(shape)
        self.name = sc.ifelse(name, "+".join(op.name for op in self.elements))
        self.table = None
        if validate:
            self.validate()
        return

    def __len__(self):
        return len(self.elements)

    def act(self, index, features, shape=None):
        """Apply element `index` to flat features"""
        shape = sc.ifelse(shape, self.shape)
        return self.elements[index].apply(features, MAX_MAGNITUDE, shape=shape)

    def orbit(self, sample):
        """The sample transformed by every element, in element order"""
        return [sample.copy(features=self.act(i, sample.features, sample.shape)) for i in range(len(self))]

    def _probe(self):
        size = int(np.prod(self.shape)) if self.shape is not None else 8
        return (np.arange(size) + 1.0) / (size + 1.0)

    def _find(self, images, image):
        for index, candidate in enumerate(images):
            if np.array_equal(candidate, image):
                return index
        return -1

    def composition_table(self):
        """table[a, b] = index of the element equal to "apply b, then a" """
        probe = self._probe()
        images = [self.act(i, probe) for i in range(len(self))]
        n = len(self)
        table = np.full((n, n), -1, dtype=int)
        for a in range(n):
            for b in range(n):
                table[a, b] = self._find(images, self.act(a, images[b]))
        return table

    def validate(self):
        if not self.elements:
            raise rp.ContractError("A group needs at least one element")
        table = self.composition_table()
        if np.any(table < 0):
            a, b = np.argwhere(table < 0)[0]
            errormsg = f"Group {self.name} is not closed: {self.elements[a].name} after {self.elements[b].name} is not an element"
            raise rp.ContractError(errormsg)
        probe = self._probe()
        identity = self._find([self.act(i, probe) for i in range(len(self))], probe)
        if identity < 0:
            raise rp.ContractError(f"Group {self.name} has no identity element")
        for a in range(len(self)):
            if identity not in table[a]:
                errormsg = f"Element {self.elements[a].name} of group {self.name} has no inverse"
                raise rp.ContractError(errormsg)
        self.table = table
        self.identity = identity
        return


def trivial_group(shape=None):
    """The one-element group {identity}"""
    domain = "image" if shape is not None else "vector"
    registry = IMAGE_OPS if shape is not None else VECTOR_OPS
    return FiniteGroup([registry["identity"]], shape=shape, name=f"trivial-{domain}")


def flip_group(shape):
    """{identity, horizontal flip}"""
    return FiniteGroup([IMAGE_OPS["identity"], IMAGE_OPS["horizontal_flip"]], shape=shape, name="flip")


def rotation_group(shape):
    """The four quarter-turn rotations of a square image"""
    elements = [IMAGE_OPS["identity"]] + [
        TransformOp(f"rotate{90 * k}", "image", _quarter_turns(k)) for k in (1, 2, 3)
    ]
    return FiniteGroup(elements, shape=shape, name="rotation4")


def group_orbit_losses(model, sample, group, kind=None):
    """
    Loss of the sample under every group element, and their (uniform) mean.

    Returns:
        (losses, mean): array with one loss per element, and its arithmetic mean
    """
    losses = rp.per_sample_losses(model, group.orbit(sample), kind)
    return losses, float(np.mean(losses))
