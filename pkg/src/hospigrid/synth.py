"""Deterministic synthetic mammography files for demos, scripts and tests.

Everything is derived from a seed with :class:`random.Random`, so the same
seed always yields byte-identical containers.
"""

from __future__ import annotations

import random
from datetime import date, timedelta

from .gridio import PAPER_FILE_SIZE
from .model import DicomLiteFile, serialize_dicom_lite

FIRST_NAMES = ("Agnese", "Beatrice", "Caroline", "Dorothea", "Eleonora", "Francesca",
               "Giovanna", "Harriet", "Isabella", "Josephine", "Katherine", "Lucrezia")
LAST_NAMES = ("Abernathy", "Bellingham", "Castellani", "Donnelly", "Esposito", "Fairweather",
              "Gallagher", "Hutchinson", "Lombardini", "Montgomery", "Pemberton", "Vasquez")
LATERALITIES = ("L", "R")
VIEWS = ("CC", "MLO")
MODALITIES = ("MG", "MG", "MG", "US")


def synth_patient(rng: random.Random) -> tuple[str, str, int]:
    """(name, patient id, age). Names and IDs are long enough that random
    pixel bytes are vanishingly unlikely to contain them."""
    name = f"{rng.choice(FIRST_NAMES)}^{rng.choice(LAST_NAMES)}"
    pid = f"PID{rng.randrange(10**8):08d}"
    return name, pid, rng.randint(35, 80)


def synth_file(rng: random.Random, image_id: str, patient=None, pixel_bytes: int = PAPER_FILE_SIZE,
               study_id: str | None = None) -> DicomLiteFile:
    name, pid, age = patient or synth_patient(rng)
    study_date = date(1998, 1, 1) + timedelta(days=rng.randrange(2000))
    tags = (
        ("PatientName", name),
        ("PatientID", pid),
        ("PatientAge", f"{age:03d}Y"),
        ("StudyDate", study_date.isoformat()),
        ("StudyID", study_id or f"ST{rng.randrange(10**6):06d}"),
        ("Modality", rng.choice(MODALITIES)),
        ("Laterality", rng.choice(LATERALITIES)),
        ("ViewPosition", rng.choice(VIEWS)),
        ("BreastDensity", str(rng.randint(1, 4))),
        ("ImageID", image_id),
    )
    return DicomLiteFile(tags, rng.randbytes(pixel_bytes))


def synth_bytes(seed: int, pixel_bytes: int = PAPER_FILE_SIZE, image_id: str | None = None) -> bytes:
    """One serialized container fully determined by ``seed``."""
    rng = random.Random(seed)
    return serialize_dicom_lite(synth_file(rng, image_id or f"IMG{seed:06d}", pixel_bytes=pixel_bytes))


def synth_site_files(seed: int, site: str, count: int, pixel_bytes: int = 64,
                     images_per_patient: int = 3) -> list[bytes]:
    """``count`` containers for one site; patients own several images."""
    rng = random.Random(f"{seed}:{site}")
    out: list[bytes] = []
    patient = None
    study = None
    for i in range(count):
        if i % images_per_patient == 0:
            patient = synth_patient(rng)
            study = f"{site[:3].upper()}-ST{rng.randrange(10**6):06d}"
        f = synth_file(rng, f"{site[:3].upper()}{i:05d}", patient, pixel_bytes, study)
        out.append(serialize_dicom_lite(f))
    return out


def parse_synth_spec(spec: str) -> bytes:
    """``synth:<seed>[:<pixel_bytes>]`` → container bytes."""
    parts = spec.split(":")
    if parts[0] != "synth" or not 2 <= len(parts) <= 3:
        raise ValueError(f"not a synth spec: {spec!r}")
    size = int(parts[2]) if len(parts) == 3 else PAPER_FILE_SIZE
    return synth_bytes(int(parts[1]), size)
