"""
Run configuration: flat `section.key = value` text with typed, range-checked keys.

Every key is declared in KEYS with its type, default and check. Parsing rejects unknown
keys and bad values with the line that caused them; `to_text()` writes the canonical
form (sorted keys, shortest round-trip floats), whose SHA-256 is the config hash.
"""

import os
import re
import hashlib
import sciris as sc
import reprise as rp

__all__ = ["ConfigKey", "KEYS", "RunConfig", "load_config", "parse_assignment"]

SEED_ENV = "OCL_SEED"


class ConfigKey(sc.prettyobj):
    """
    Declaration of one configuration key.

    Args:
        name (str): dotted key
        kind (str): "int", "float", "bool", "str", "ints" (comma list) or "pairs" (comma list of p:q)
        default: default value (already parsed)
        check (callable): returns an error message for a bad value, or None
        optional (bool): "none" is an allowed value
        doc (str): one-line description for the key reference
    """

    def __init__(self, name, kind, default, check=None, optional=False, doc=""):
        self.name = name
        self.kind = kind
        self.default = default
        self.check = check
        self.optional = optional
        self.doc = doc
        return

    def parse(self, text):
        text = text.strip()
        if self.optional and text.lower() in ("none", ""):
            return None
        if self.kind == "int":
            return int(text)
        if self.kind == "float":
            return float(text)
        if self.kind == "bool":
            if text.lower() not in ("true", "false"):
                raise ValueError(f"expected true or false, not {text!r}")
            return text.lower() == "true"
        if self.kind == "str":
            return text
        if self.kind == "ints":
            return [int(item) for item in _items(text)]
        if self.kind == "pairs":
            pairs = []
            for item in _items(text):
                p, sep, q = item.partition(":")
                if not sep:
                    raise ValueError(f"expected p:q, not {item!r}")
                pairs.append((int(p), _number(q)))
            return pairs
        raise ValueError(f"unknown key type {self.kind}")

    def format(self, value):
        if value is None:
            return "none"
        if self.kind == "float":
            return rp.fmt_float(value)
        if self.kind == "bool":
            return "true" if value else "false"
        if self.kind == "ints":
            return ",".join(str(v) for v in value)
        if self.kind == "pairs":
            return ",".join(f"{p}:{_format_number(q)}" for p, q in value)
        return str(value)

    def validate(self, value):
        if value is None:
            return None if self.optional else "a value is required"
        if self.check is not None:
            return self.check(value)
        return None


def _items(text):
    return [item.strip() for item in text.split(",") if item.strip()]


def _number(text):
    text = text.strip()
    return int(text) if re.fullmatch(r"-?\d+", text) else float(text)


def _format_number(value):
    return str(value) if isinstance(value, int) else rp.fmt_float(value)


def _at_least(lo):
    return lambda v: None if v >= lo else f"must be at least {lo}"


def _between(lo, hi, open=False):
    if open:
        return lambda v: None if lo < v < hi else f"must lie in ({lo}, {hi})"
    return lambda v: None if lo <= v <= hi else f"must lie in [{lo}, {hi}]"


def _one_of(*choices):
    return lambda v: None if v in choices else f"must be one of {list(choices)}"


def _list_of(check, nonempty=True):
    def fn(values):
        if nonempty and not values:
            return "must not be empty"
        for value in values:
            msg = check(value)
            if msg:
                return f"entry {value}: {msg}"
        return None

    return fn


def _pairs_check(values):
    if not values:
        return "must not be empty"
    for p, q in values:
        if p < 1 or not 0 <= q <= rp.MAX_MAGNITUDE:
            return f"pair {p}:{q} needs P >= 1 and Q in [0, {rp.MAX_MAGNITUDE}]"
    return None


_key_list = [
    ConfigKey("seed", "int", 0, _at_least(0), doc="root seed of every random draw"),
    # Stream
    ConfigKey("stream.kind", "str", "synthetic", _one_of("synthetic", "idx"), doc="synthetic Gaussian classes or IDX image files"),
    ConfigKey("stream.num_tasks", "int", 5, _at_least(1), doc="number of tasks"),
    ConfigKey("stream.classes_per_task", "int", 2, _at_least(1), doc="classes per synthetic task"),
    ConfigKey("stream.samples_per_class_train", "int", 50, _at_least(1), doc="training samples per synthetic class"),
    ConfigKey("stream.samples_per_class_test", "int", 20, _at_least(1), doc="test samples per synthetic class"),
    ConfigKey("stream.input_dim", "int", 20, _at_least(1), doc="synthetic feature dimension"),
    ConfigKey("stream.class_separation", "float", 3.0, lambda v: None if v > 0 else "must be positive", doc="radius of the sphere holding the synthetic class means"),
    ConfigKey("stream.train_sizes", "ints", None, _list_of(_at_least(1)), optional=True, doc="training samples per class, one entry per task (imbalanced streams)"),
    ConfigKey("stream.images_path", "str", None, optional=True, doc="IDX image file"),
    ConfigKey("stream.labels_path", "str", None, optional=True, doc="IDX label file"),
    ConfigKey("stream.test_images_path", "str", None, optional=True, doc="IDX test image file"),
    ConfigKey("stream.test_labels_path", "str", None, optional=True, doc="IDX test label file"),
    ConfigKey("stream.test_fraction", "float", 0.2, _between(0.0, 1.0), doc="held-out share per class when no test files are given"),
    # Model
    ConfigKey("model.hidden", "ints", [64], _list_of(_at_least(1), nonempty=False), doc="hidden layer widths"),
    ConfigKey("model.activation", "str", "relu", _one_of(*rp.nn.ACTIVATIONS), doc="hidden activation"),
    # Rehearsal
    ConfigKey("rehearsal.k", "int", 10, _at_least(1), doc="inner iterations per incoming batch"),
    ConfigKey("rehearsal.lr", "float", 0.1, lambda v: None if v > 0 else "must be positive", doc="learning rate"),
    ConfigKey("rehearsal.incoming_batch_size", "int", 10, _at_least(1), doc="incoming batch size"),
    ConfigKey("rehearsal.memory_batch_size", "int", 10, _at_least(1), doc="memory batch size"),
    ConfigKey("rehearsal.memory_capacity", "int", 100, _at_least(0), doc="reservoir size (0 trains without memory)"),
    ConfigKey("rehearsal.loss", "str", "cross_entropy", _one_of("cross_entropy", "squared_error"), doc="loss on incoming and memory samples"),
    ConfigKey("rehearsal.der_alpha", "float", None, _between(0.0, 1.0), optional=True, doc="distillation weight on memory samples (DER)"),
    ConfigKey("rehearsal.alpha_rw", "float", None, _between(0.0, 1.0, open=True), optional=True, doc="memory weight of ER-rw"),
    ConfigKey("rehearsal.retrieval", "str", "uniform_random", _one_of(*rp.memory.RETRIEVAL_KINDS), doc="memory batch retrieval"),
    ConfigKey("rehearsal.mir_candidates", "int", 50, _at_least(1), doc="MIR candidate pool size"),
    ConfigKey("rehearsal.offline_epochs", "int", None, _at_least(1), optional=True, doc="passes per task (offline mode)"),
    # Augmentation
    ConfigKey("aug.target", "str", "both", _one_of(*rp.AUG_TARGETS), doc="augmented part of each rehearsal batch"),
    ConfigKey("aug.p", "int", 1, _at_least(1), doc="ops per sample"),
    ConfigKey("aug.q", "float", 14.0, _between(0, rp.MAX_MAGNITUDE), doc="op magnitude"),
    ConfigKey("aug.ops", "str", None, optional=True, doc="comma-separated op names (default: all ops of the data domain)"),
    # Tuner
    ConfigKey("tuner.enabled", "bool", False, doc="choose (K, P, Q) online with the bandit"),
    ConfigKey("tuner.iteration_arms", "ints", list(range(1, 21)), _list_of(_at_least(1)), doc="candidate K values"),
    ConfigKey("tuner.aug_arms", "pairs", [(1, 5), (1, 14), (2, 14), (3, 14), (4, 14)], _pairs_check, doc="candidate P:Q pairs, weakest first"),
    ConfigKey("tuner.target_acc", "float", 0.9, _between(0.0, 1.0, open=True), doc="target memory accuracy"),
    ConfigKey("tuner.lr_rl", "float", 0.5, lambda v: None if v > 0 else "must be positive", doc="bandit step size"),
    # Sweep
    ConfigKey("sweep.k_values", "ints", [1, 10], _list_of(_at_least(1)), doc="K values of the sweep grid"),
    ConfigKey("sweep.aug_arms", "pairs", [(1, 14)], _pairs_check, doc="P:Q pairs of the sweep grid"),
    ConfigKey("sweep.validation_tasks", "int", 2, _at_least(1), doc="tasks in the validation stream"),
    ConfigKey("sweep.epochs", "int", 1, _at_least(1), doc="passes per validation task"),
    # Landscape
    ConfigKey("landscape.resolution", "int", 41, _at_least(2), doc="grid nodes per axis"),
    ConfigKey("landscape.task1_epochs", "int", 5, _at_least(1), doc="passes over task 1 to reach w1"),
    # Output
    ConfigKey("output.dir", "str", "runs/default", doc="run directory"),
    ConfigKey("output.checkpoints", "bool", True, doc="save a checkpoint after each task"),
    ConfigKey("output.trace", "bool", True, doc="write the per-iteration trace CSV"),
]
KEYS = {key.name: key for key in _key_list}


def parse_assignment(line):
    """Split `key = value` (surrounding spaces ignored); returns (key, value) or None for blank/comment lines"""
    line = line.split("#", 1)[0].strip()
    if not line:
        return None
    key, sep, value = line.partition("=")
    if not sep:
        raise ValueError("expected `key = value`")
    return key.strip(), value.strip()


class RunConfig(sc.prettyobj):
    """
    A complete, validated run configuration.

    Values are read with item access (`cfg["rehearsal.k"]`); unset keys hold their defaults.

    **Example**::

        cfg = rp.RunConfig.from_text("rehearsal.k = 1\\naug.target = none\\n")
        cfg = cfg.with_overrides(["seed=3"])
        print(cfg.hash())
    """

    def __init__(self, values=None, source="<config>"):
        self.source = source
        self.values = {name: sc.dcp(key.default) for name, key in KEYS.items()}
        for name, value in sc.mergedicts(values).items():
            self.set(name, value, where=source)
        return

    def __getitem__(self, name):
        if name not in self.values:
            raise rp.ConfigError(f"Unknown config key {name!r}")
        return self.values[name]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    def set(self, name, value, where=None):
        """Set an already-parsed value, with validation"""
        where = sc.ifelse(where, self.source)
        if name not in KEYS:
            errormsg = f"{where}: unknown key {name!r}"
            raise rp.ConfigError(errormsg)
        msg = KEYS[name].validate(value)
        if msg:
            errormsg = f"{where}: {name} = {KEYS[name].format(value)} {msg}"
            raise rp.ConfigError(errormsg)
        self.values[name] = value
        return

    def assign(self, name, text, where=None):
        """Set a value from its text form"""
        where = sc.ifelse(where, self.source)
        if name not in KEYS:
            raise rp.ConfigError(f"{where}: unknown key {name!r}")
        try:
            value = KEYS[name].parse(text)
        except ValueError as E:
            errormsg = f"{where}: cannot parse {name} = {text!r} as {KEYS[name].kind}: {E}"
            raise rp.ConfigError(errormsg) from E
        self.set(name, value, where=where)
        return

    @classmethod
    def from_text(cls, text, source="<config>"):
        cfg = cls(source=source)
        seen = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            where = f"{source}:{lineno}"
            try:
                parsed = parse_assignment(line)
            except ValueError as E:
                raise rp.ConfigError(f"{where}: {E}") from E
            if parsed is None:
                continue
            name, value = parsed
            if name in seen:
                errormsg = f"{where}: {name} already set on line {seen[name]}"
                raise rp.ConfigError(errormsg)
            seen[name] = lineno
            cfg.assign(name, value, where=where)
        cfg.check()
        return cfg

    @classmethod
    def from_file(cls, path):
        path = sc.path(path)
        if not path.is_file():
            raise rp.ConfigError(f"Config file {path} does not exist")
        return cls.from_text(sc.loadtext(path), source=str(path))

    def with_overrides(self, overrides):
        """A copy with `key=value` overrides applied"""
        cfg = sc.dcp(self)
        for i, item in enumerate(sc.tolist(overrides), start=1):
            where = f"override {i} ({item})"
            try:
                parsed = parse_assignment(item)
            except ValueError as E:
                raise rp.ConfigError(f"{where}: {E}") from E
            if parsed is not None:
                cfg.assign(*parsed, where=where)
        cfg.check()
        return cfg

    def check(self):
        """Checks that involve more than one key"""
        v = self.values
        if v["stream.kind"] == "idx" and not (v["stream.images_path"] and v["stream.labels_path"]):
            raise rp.ConfigError(f"{self.source}: stream.kind = idx needs stream.images_path and stream.labels_path")
        if v["rehearsal.retrieval"] == "mir" and v["rehearsal.mir_candidates"] < v["rehearsal.memory_batch_size"]:
            raise rp.ConfigError(f"{self.source}: rehearsal.mir_candidates is smaller than rehearsal.memory_batch_size")
        if v["rehearsal.der_alpha"] is not None and v["rehearsal.alpha_rw"] is not None:
            raise rp.ConfigError(f"{self.source}: rehearsal.der_alpha and rehearsal.alpha_rw cannot be combined")
        if v["stream.train_sizes"] is not None and len(v["stream.train_sizes"]) != v["stream.num_tasks"]:
            raise rp.ConfigError(f"{self.source}: stream.train_sizes needs one entry per task")
        return

    def to_text(self):
        """Canonical text: every key, sorted, one per line"""
        lines = [f"{name} = {KEYS[name].format(self.values[name])}" for name in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def section(self, section):
        """Values of one section, keyed by the part after the dot"""
        prefix = f"{section}."
        return sc.objdict({name[len(prefix) :]: val for name, val in self.values.items() if name.startswith(prefix)})


def load_config(path=None, overrides=None, environ=None):
    """
    Read a config file (or start from the defaults), apply overrides, then the
    OCL_SEED environment variable, which takes precedence over the seed key.
    """
    cfg = RunConfig.from_file(path) if path is not None else RunConfig(source="<defaults>")
    if overrides:
        cfg = cfg.with_overrides(overrides)
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV, "").strip():
        cfg.assign("seed", environ[SEED_ENV], where=f"environment variable {SEED_ENV}")
    return cfg
