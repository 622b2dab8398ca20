"""Render the labeled source set in every target camera style with a trained generator."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import DatasetManifest, ImageRecord, quantize, save_manifest, write_image
from .gan_models import Generator, generator_from_params, translate_batch
from .params import ModelParams

MANIFEST_NAME = "translated.manifest"


@dataclass(frozen=True)
class TranslationJob:
    """What to translate and where.

    ``generator`` is a generator :class:`ModelParams`, a ``Generator`` module,
    or any callable ``fn(images, domain_indices) -> images`` (NHWC arrays). A
    plain callable should expose ``num_domains`` unless ``target_cameras`` is
    given explicitly. Domain 0 (the source style) is never rendered.
    """

    generator: object
    source: DatasetManifest
    output_dir: Path
    target_cameras: tuple | None = None
    seed: int = 0
    batch_size: int = 64


def _resolve_generator(gen):
    if isinstance(gen, ModelParams):
        gen = generator_from_params(gen)
    if isinstance(gen, Generator):
        module = gen.eval()
        return (lambda X, c: translate_batch(module, X, c)), module.config.num_domains
    return gen, getattr(gen, "num_domains", None)


def translate_dataset(job):
    """Write ``|source| * |target cameras|`` translated images plus a manifest.

    Records keep their source identity, take the target camera as their
    camera, and name the source image in their provenance.
    """
    fn, num_domains = _resolve_generator(job.generator)
    if job.target_cameras is None:
        if num_domains is None:
            raise ValueError("target_cameras must be given for a generator without num_domains")
        cams = tuple(range(1, num_domains))
    else:
        cams = tuple(int(c) for c in job.target_cameras)
    if not cams:
        raise ValueError("target camera list is empty")
    limit = num_domains - 1 if num_domains is not None else max(cams)
    bad = [c for c in cams if not 1 <= c <= limit]
    if bad:
        raise ValueError(f"camera {bad[0]} outside the generator's domain vocabulary 1..{limit}")

    out_dir = Path(job.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src = job.source
    X = src.load_images()
    n = len(src)
    translated = np.empty((n * len(cams),) + src.image_shape, dtype=np.float32)
    for j, cam in enumerate(cams):
        translated[j::len(cams)] = quantize(fn(X, np.full(n, cam, dtype=np.int64)))

    records = []
    for i, rec in enumerate(src.records):
        for j, cam in enumerate(cams):
            ref = f"{rec.identity:04d}_c{cam}_{i:06d}.png"
            write_image(out_dir / ref, translated[i * len(cams) + j])
            records.append(ImageRecord(ref, rec.identity, cam, "train", f"translated-from:{rec.image_ref}"))

    manifest = DatasetManifest(
        records=records,
        num_cameras=limit,
        image_height=src.image_height,
        image_width=src.image_width,
        image_channels=src.image_channels,
        name=f"{src.name}-translated",
        seed=job.seed,
        root=out_dir,
        images=translated,
    )
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    return manifest
