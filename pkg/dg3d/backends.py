from __future__ import annotations

import abc
import dataclasses
import json
import logging
import shlex
import subprocess
import threading
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BackendError, ConfigError
from .imageio import read_ppm, write_pgm, write_pgm_u16, write_ppm
from .numgrad import Array
from .priors import PromptSynthesizer, TranslationRequest
from .render import DepthMap, ImageBuffer
from .util import create_temp_dir

logger = logging.getLogger("dg3d")


class TranslationBackend(abc.ABC):
    @abc.abstractmethod
    def run(self, request: TranslationRequest) -> ImageBuffer:
        ...

    def last_log(self) -> str:
        return ""

    def __str__(self) -> str:
        return type(self).__name__


class IdentityBackend(TranslationBackend):
    def run(self, request: TranslationRequest) -> ImageBuffer:
        return ImageBuffer(request.image.pixels.copy())


@dataclasses.dataclass
class ProceduralBackend(TranslationBackend):
    """Blends foreground pixels toward the prompt's synthesized pattern.

    The blend factor is ``strength``, damped on edges and on far depth by the
    control weights; background pixels and ``strength == 0`` return the input.
    """

    synthesizer: PromptSynthesizer = dataclasses.field(default_factory=PromptSynthesizer)

    def run(self, request: TranslationRequest) -> ImageBuffer:
        image = request.image.pixels
        if request.strength == 0.0:
            return ImageBuffer(image.copy())
        height, width = request.image.resolution
        pattern = self.synthesizer.synthesize(request.prompt, height, width)
        rng = np.random.default_rng(request.seed)
        pattern = np.clip(pattern + 0.02 * rng.standard_normal(pattern.shape), 0.0, 1.0)
        edges = request.edge_control.pixels[..., 0]
        coverage = request.depth_control.coverage
        depth = request.depth_control.depth
        foreground = coverage > 0.5
        if foreground.any():
            near, far = depth[foreground].min(), depth[foreground].max()
            closeness = np.where(
                foreground, 1.0 - (depth - near) / max(far - near, 1e-12), 0.0
            )
        else:
            closeness = np.zeros_like(depth)
        keep_edges = 1.0 - 0.5 * min(request.edge_weight, 1.0) * edges
        depth_gain = 1.0 - 0.5 * min(request.depth_weight, 1.0) * (1.0 - closeness)
        factor = request.strength * keep_edges * depth_gain * foreground
        return ImageBuffer(image + factor[..., None] * (pattern - image))


def depth_levels(depth: DepthMap) -> Array:
    """Foreground depth mapped linearly from its nearest (0) to its farthest (65535) value; background reads 65535."""
    foreground = depth.coverage > 0.5
    if not foreground.any():
        return np.full(depth.depth.shape, 65535.0)
    near, far = depth.depth[foreground].min(), depth.depth[foreground].max()
    scaled = np.round((depth.depth - near) / max(far - near, 1e-12) * 65535.0)
    return np.where(foreground, np.clip(scaled, 0.0, 65535.0), 65535.0)


class ExternalBackend(TranslationBackend):
    """Runs ``command <request dir>`` and reads ``output.ppm`` back.

    The request directory holds ``image.ppm``, ``edge.ppm``, ``depth.pgm``,
    ``mask.pgm`` (inpainting only) and ``request.json``. Calls are serialized.
    With ``keep_dir`` set, call n leaves a copy of its request directory,
    backend output included, in ``keep_dir/call_<n>``.
    """

    def __init__(self, command: str, keep_dir: Optional[Path] = None) -> None:
        self.command = tuple(shlex.split(command))
        if not self.command:
            raise ConfigError("backend", "external backend needs a command")
        self.keep_dir = keep_dir
        self._lock = threading.Lock()
        self._calls = 0
        self._log = ""

    def last_log(self) -> str:
        return self._log

    def run(self, request: TranslationRequest) -> ImageBuffer:
        with self._lock, create_temp_dir() as tmp:
            self._calls += 1
            write_ppm(tmp / "image.ppm", request.image.pixels)
            write_ppm(tmp / "edge.ppm", request.edge_control.pixels)
            write_pgm_u16(tmp / "depth.pgm", depth_levels(request.depth_control))
            if request.mask is not None:
                write_pgm(tmp / "mask.pgm", request.mask.astype(np.float64), bits=8)
            (tmp / "request.json").write_text(json.dumps(request.sidecar(), indent=2))
            command = [*self.command, str(tmp)]
            if logger.isEnabledFor(logging.INFO):
                logger.info("Running: %s", shlex.join(command))
            proc = subprocess.run(command, check=False, capture_output=True)
            (tmp / "stdout").write_bytes(proc.stdout)
            (tmp / "stderr").write_bytes(proc.stderr)
            self._log = (
                proc.stdout.decode(errors="replace") + proc.stderr.decode(errors="replace")
            )
            if self.keep_dir is not None:
                kept = self.keep_dir / f"call_{self._calls:03d}"
                kept.mkdir(parents=True, exist_ok=True)
                for path in tmp.iterdir():
                    (kept / path.name).write_bytes(path.read_bytes())
            if proc.returncode != 0:
                raise BackendError(
                    f"{shlex.join(command)} exited with status {proc.returncode}", self._log
                )
            output = tmp / "output.ppm"
            if not output.exists():
                raise BackendError(f"{shlex.join(command)} wrote no output.ppm", self._log)
            try:
                pixels = read_ppm(output)
            except (OSError, ValueError) as exc:
                raise BackendError(f"malformed output.ppm: {exc}", self._log) from exc
        return ImageBuffer(pixels)

    def __str__(self) -> str:
        return f"ExternalBackend {shlex.join(self.command)}"


def parse_backend(
    name: str,
    synthesizer: Optional[PromptSynthesizer] = None,
    keep_dir: Optional[Path] = None,
) -> TranslationBackend:
    """``identity``, ``procedural``, or ``external:CMD``; ``keep_dir`` applies to external backends only."""
    if name == "identity":
        return IdentityBackend()
    if name == "procedural":
        return ProceduralBackend(synthesizer or PromptSynthesizer())
    if name.startswith("external:"):
        return ExternalBackend(name[len("external:") :], keep_dir)
    raise ConfigError("backend", f"unknown backend {name!r}")
