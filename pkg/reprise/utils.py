"""
Shared helpers: exceptions, logging, random-number plumbing and text formats.
"""

import csv
import numpy as np
import sciris as sc

__all__ = [
    "RepriseError",
    "ContractError",
    "NumericError",
    "FormatError",
    "DegeneratePlaneError",
    "ConfigError",
    "log",
    "make_rng",
    "child_seeds",
    "fmt_float",
    "write_csv",
    "read_csv",
]


class RepriseError(Exception):
    """Base class for every error raised by reprise"""

    pass


class ContractError(RepriseError, ValueError):
    """A precondition or contract of an operation was violated"""

    pass


class NumericError(RepriseError, ArithmeticError):
    """A non-finite value appeared during evaluation"""

    pass


class FormatError(RepriseError, ValueError):
    """A file on disk does not follow the expected format"""

    pass


class DegeneratePlaneError(ContractError):
    """The directions spanning a landscape plane are zero or parallel"""

    pass


class ConfigError(RepriseError, ValueError):
    """A run configuration could not be parsed or validated"""

    pass


def log(string, color="green", verbose=True):
    """Print if verbose is True, using the sciris color printers"""
    if verbose:
        printfunc = dict(
            default=print,
            red=sc.printred,
            green=sc.printgreen,
            blue=sc.printcyan,
            yellow=sc.printyellow,
        )[color]
        printfunc(string)
    return


def make_rng(seed=None):
    """
    Return a numpy Generator; an existing Generator is passed through unchanged.

    Args:
        seed (int/Generator/SeedSequence): the seed or generator

    **Example**::

        rng = rp.make_rng(0)
        rng.integers(0, 10)
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def child_seeds(root_seed, n):
    """
    Derive n independent integer seeds from a root seed.

    All randomness in a run flows from one root seed; replicas, grid points and
    workers get their own stream through this function so that results do not
    depend on evaluation order.
    """
    seq = np.random.SeedSequence(root_seed)
    return [int(child.generate_state(1)[0]) for child in seq.spawn(n)]


def fmt_float(value):
    """Shortest decimal that round-trips to the same 64-bit float"""
    if value is None:
        return ""
    value = float(value)
    if np.isnan(value):
        return "nan"
    return repr(value)


def write_csv(path, rows, fieldnames):
    """
    Write a list of dict rows to CSV with a mandatory header row.

    Floats are written with shortest round-trip formatting and a `.` decimal
    separator, so identical runs produce byte-identical files.
    """
    path = sc.makefilepath(path, makedirs=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n"
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    key: fmt_float(val) if isinstance(val, (float, np.floating)) else val
                    for key, val in row.items()
                }
            )
    return path


def read_csv(path):
    """Read a CSV written by write_csv into a list of objdicts (values as strings)"""
    with open(path, "r", newline="") as f:
        return [sc.objdict(row) for row in csv.DictReader(f)]
