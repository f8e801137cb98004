"""Seed corpus on disk: raw frame files plus a JSON manifest."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum

MANIFEST_NAME = "manifest.json"


class Provenance(Enum):
    BMC = "bmc"
    MUTATED = "mutated"
    SERVER_GENERATED = "server"


class SeedError(OSError):
    """Corpus files could not be written or read."""


@dataclass(frozen=True, slots=True)
class SeedEntry:
    file: str
    path_id: str
    depth: int
    provenance: Provenance


@dataclass(frozen=True, slots=True)
class SeedCorpus:
    directory: str
    entries: tuple[SeedEntry, ...] = ()

    def read_seed(self, entry: SeedEntry) -> bytes:
        try:
            with open(os.path.join(self.directory, entry.file), "rb") as fh:
                return fh.read()
        except OSError as exc:
            raise SeedError(str(exc)) from exc


def save_corpus(directory: str, seeds: list[tuple[str, bytes, str, int, Provenance]]) -> SeedCorpus:
    """Write seed files and the manifest.

    ``seeds`` rows are ``(filename, data, path_id, depth, provenance)``;
    filenames must be unique.
    """
    entries = []
    try:
        os.makedirs(directory, exist_ok=True)
        for filename, data, path_id, depth, provenance in seeds:
            with open(os.path.join(directory, filename), "wb") as fh:
                fh.write(data)
            entries.append(SeedEntry(filename, path_id, depth, provenance))
        manifest = [
            {
                "file": e.file,
                "path_id": e.path_id,
                "depth": e.depth,
                "provenance": e.provenance.value,
            }
            for e in entries
        ]
        tmp = os.path.join(directory, MANIFEST_NAME + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1)
        os.replace(tmp, os.path.join(directory, MANIFEST_NAME))
    except OSError as exc:
        raise SeedError(f"cannot write corpus to {directory}: {exc}") from exc
    return SeedCorpus(directory=directory, entries=tuple(entries))


def load_corpus(directory: str) -> SeedCorpus:
    try:
        with open(os.path.join(directory, MANIFEST_NAME), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        entries = tuple(
            SeedEntry(
                file=row["file"],
                path_id=row["path_id"],
                depth=int(row["depth"]),
                provenance=Provenance(row["provenance"]),
            )
            for row in manifest
        )
    except (OSError, KeyError, ValueError) as exc:
        raise SeedError(f"cannot load corpus from {directory}: {exc}") from exc
    return SeedCorpus(directory=directory, entries=entries)
