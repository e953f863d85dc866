"""Run directories: tables, measures, fields and particle paths on disk."""

import json
import os
import struct
from contextlib import contextmanager
from enum import Flag, auto
from functools import wraps
from pathlib import Path
from tempfile import NamedTemporaryFile
import numpy as np
from .exceptions import ProgrammingError, UnsupportedInputError
from .field import DecouplingField
from .inner_solver import ParticlePaths
from .measure import EmpiricalMeasure, MeasureFlow

PATHS_MAGIC = b"MKVP"
PATHS_VERSION = 1
PATHS_HEADER = struct.Struct("<4sIIIIIIq")
"""Little-endian header of binary path files: magic, version, d, p, m, M, N, seed."""


def format_float(value):
    """Decimal representation with 17 significant digits."""
    return format(float(value), ".17g")


def requires_access_mode(access_mode):
    """Restrict a driver method to drivers opened for `access_mode`.

    Writes through a read driver, reads through a write driver and any use after the context has
    closed are errors in the calling code and raise :class:`.ProgrammingError`.
    """

    def decorate(method):
        @wraps(method)
        def guarded(driver, *args, **kwargs):
            if not driver.is_open:
                raise ProgrammingError(f"run directory {driver} was used after its context closed")
            if access_mode not in driver.access_mode:
                raise ProgrammingError(
                    f"{method.__name__} needs {access_mode.name.lower()} access but run directory "
                    f"{driver} is open for {driver.access_mode.name.lower()}"
                )
            return method(driver, *args, **kwargs)

        return guarded

    return decorate


class AccessMode(Flag):
    """Flag determining what a driver may do with its run directory."""

    READ = auto()
    WRITE = auto()


class RunDriver:
    """Reads and writes the files of one run directory.

    Every file is written to a temporary file in its target directory first and then renamed into
    place, so readers never see partial files. The names of written files are kept in
    :attr:`inventory`.
    """

    def __init__(self, path, access_mode, encoding="UTF-8"):
        self._path = Path(path)
        self.access_mode = access_mode
        self.encoding = encoding
        self.inventory = []
        self.is_open = False

    @property
    def path(self):
        """Run directory every file name is resolved against."""
        return self._path

    def open(self):
        if AccessMode.WRITE in self.access_mode:
            self.path.mkdir(parents=True, exist_ok=True)
        self.is_open = True

    def close(self):
        self.is_open = False

    @requires_access_mode(AccessMode.WRITE)
    def write_table(self, name, header, rows):
        """Write a CSV table with a header row; numbers get 17 significant digits."""

        def write(fp):
            fp.write(",".join(header) + "\n")
            for row in rows:
                fp.write(self._format_line(row))

        self._atomic_write(name, write)

    @requires_access_mode(AccessMode.WRITE)
    def write_json(self, name, document):
        self._atomic_write(name, lambda fp: json.dump(document, fp, indent=2, sort_keys=True))

    @requires_access_mode(AccessMode.WRITE)
    def write_measure(self, name, measure):
        """One atom per row, weight column last."""
        header = [f"x_{i}" for i in range(1, measure.dim + 1)] + ["weight"]
        rows = (list(point) + [weight] for point, weight in zip(measure.points, measure.weights))
        self.write_table(name, header, rows)

    @requires_access_mode(AccessMode.WRITE)
    def write_flow(self, name, flow):
        """Directory of per-time measure files plus an index."""
        files = [f"{name}/{k:05d}.csv" for k in range(len(flow))]
        for file_name, measure in zip(files, flow):
            self.write_measure(file_name, measure)
        self.write_json(f"{name}/index.json", {"times": flow.times.tolist(), "files": files})

    @requires_access_mode(AccessMode.WRITE)
    def write_field(self, name, field):
        grid = field.grid
        header = (
            ["t"]
            + [f"x_{i}" for i in range(1, grid.d + 1)]
            + [f"u_{i}" for i in range(1, field.p + 1)]
        )
        self.write_table(name, header, field.rows())

    @requires_access_mode(AccessMode.WRITE)
    def write_paths_summary(self, name, paths):
        header, rows = paths.summary()
        self.write_table(name, header, rows)

    @requires_access_mode(AccessMode.WRITE)
    def write_paths(self, name, paths):
        """Binary dump: header, then row-major little-endian float64 X, Y, Z and dW."""
        d, p, m = paths.dims

        def write(fp):
            fp.write(
                PATHS_HEADER.pack(
                    PATHS_MAGIC, PATHS_VERSION, d, p, m, paths.M, paths.N, paths.seed
                )
            )
            for array in (paths.X, paths.Y, paths.Z, paths.dW):
                fp.write(np.ascontiguousarray(array, dtype="<f8").tobytes())

        self._atomic_write(name, write, binary=True)

    @requires_access_mode(AccessMode.READ)
    def read_table(self, name):
        """Header and numeric body of a CSV table."""
        with (self.path / name).open(encoding=self.encoding) as fp:
            lines = self._read_lines(fp)
            header = next(lines).split(",")
            rows = [[float(value) for value in line.split(",")] for line in lines]

        return header, np.array(rows, dtype=float).reshape(len(rows), len(header))

    @requires_access_mode(AccessMode.READ)
    def read_json(self, name):
        with (self.path / name).open(encoding=self.encoding) as fp:
            return json.load(fp)

    @requires_access_mode(AccessMode.READ)
    def read_measure(self, name):
        header, body = self.read_table(name)
        if header[-1] != "weight":
            return EmpiricalMeasure(body)

        weights = body[:, -1]
        # Uniform clouds round-trip to exactly uniform weights.
        if np.ptp(weights) == 0:
            weights = None
        return EmpiricalMeasure(body[:, :-1], weights)

    @requires_access_mode(AccessMode.READ)
    def read_flow(self, name):
        index = self.read_json(f"{name}/index.json")
        return MeasureFlow(index["times"], [self.read_measure(file) for file in index["files"]])

    @requires_access_mode(AccessMode.READ)
    def read_field(self, name, grid):
        header, body = self.read_table(name)
        p = len(header) - 1 - grid.d
        values = body[:, 1 + grid.d:].reshape((grid.n_t + 1,) + grid.shape + (p,))
        return DecouplingField(grid, values)

    @requires_access_mode(AccessMode.READ)
    def read_paths(self, name, times):
        """Load a binary path dump; `times` are the time nodes, which the file does not store."""
        data = (self.path / name).read_bytes()
        magic, version, d, p, m, M, N, seed = PATHS_HEADER.unpack_from(data)
        if magic != PATHS_MAGIC or version != PATHS_VERSION:
            raise UnsupportedInputError(f"{name} is not a version {PATHS_VERSION} path file")

        shapes = [(M, N + 1, d), (M, N + 1, p), (M, N, p, m), (M, N, m)]
        arrays = []
        offset = PATHS_HEADER.size
        for shape in shapes:
            count = int(np.prod(shape))
            array = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            arrays.append(array.reshape(shape))
            offset += 8 * count

        return ParticlePaths(np.asarray(times, dtype=float), *arrays, seed=seed)

    def _format_line(self, values):
        return ",".join(format_float(value) for value in values) + "\n"

    def _atomic_write(self, name, write, binary=False):
        target = self.path / name
        target.parent.mkdir(parents=True, exist_ok=True)

        with NamedTemporaryFile(
            mode="wb" if binary else "w",
            prefix=f"{target.name}.",
            suffix=".tmp",
            dir=str(target.parent),
            delete=False,
            **({} if binary else {"encoding": self.encoding, "newline": ""}),
        ) as fp:
            try:
                write(fp)
            except BaseException:
                fp.close()
                os.unlink(fp.name)
                raise

        os.replace(fp.name, target)

        if name not in self.inventory:
            self.inventory.append(name)

    @staticmethod
    def _read_lines(fp, buf_size=8192):
        """Memory-efficient line reader skipping empty lines."""
        remainder = ""

        while True:
            block = fp.read(buf_size)

            if not block:
                break

            lines = (remainder + block).split("\n")
            remainder = lines.pop()

            for line in lines:
                if line.strip():
                    yield line.strip()

        if remainder.strip():
            yield remainder.strip()

    def __str__(self):
        return str(self.path)

    def __repr__(self):
        return f"{self.__class__.__name__}({self.path}, {self.access_mode})"


class RunDirectory:
    """A directory holding the outputs of one run."""

    def __init__(self, path, encoding="UTF-8"):
        self._path = Path(path)
        self.encoding = encoding

    @property
    def path(self):
        return self._path

    @contextmanager
    def reader(self):
        """Open the run directory in read mode."""
        yield from self._yield_driver_with_mode(AccessMode.READ)

    @contextmanager
    def writer(self):
        """Open the run directory in write mode."""
        yield from self._yield_driver_with_mode(AccessMode.WRITE)

    def _yield_driver_with_mode(self, mode):
        ctx_driver = RunDriver(self.path, mode, self.encoding)
        ctx_driver.open()
        try:
            yield ctx_driver
        finally:
            ctx_driver.close()

    def __str__(self):
        return str(self.path)

    def __repr__(self):
        return f"{self.__class__.__name__}({self.path})"


def load_measure(path):
    """Read a measure CSV from anywhere on disk."""
    path = Path(path)
    with RunDirectory(path.parent).reader() as driver:
        return driver.read_measure(path.name)
