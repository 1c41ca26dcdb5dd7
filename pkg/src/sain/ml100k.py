"""Converter from the official MovieLens-100k archive layout (u.data, u.user,
u.item, u.genre) into this package's tab-separated files plus a dataset
manifest. Only the attributes shipped in the archive are extracted: user
gender, age (bucketed by decade), occupation, and item genres.

The archive itself is not bundled; point the converter at an unpacked copy
(u.data etc. in one directory).
"""

from __future__ import annotations

import json
import os

from .errors import IoError, ParseError

GENRES = ("unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
          "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
          "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western")

ENV_VAR = "SAIN_ML100K_DIR"


def find_ml100k(base_dir: str | None = None) -> str | None:
    """Locate an unpacked archive: the SAIN_ML100K_DIR environment variable, or
    data/ml-100k under base_dir (default: current directory)."""
    candidates = []
    if os.environ.get(ENV_VAR):
        candidates.append(os.environ[ENV_VAR])
    root = base_dir or os.getcwd()
    candidates.append(os.path.join(root, "data", "ml-100k"))
    for c in candidates:
        if os.path.isfile(os.path.join(c, "u.data")):
            return c
    return None


def _require(path: str) -> str:
    if not os.path.isfile(path):
        raise IoError(f"file not found: {path}")
    return path


def _read_genres(src_dir: str) -> list[str]:
    """Genre names in column order, from u.genre when present."""
    path = os.path.join(src_dir, "u.genre")
    if not os.path.isfile(path):
        return list(GENRES)
    names: list[tuple[int, str]] = []
    with open(path, encoding="latin-1") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 2:
                raise ParseError(f"{path} line {lineno}: expected genre|index")
            names.append((int(parts[1]), parts[0]))
    return [name for _, name in sorted(names)]


def age_bucket(age: int) -> str:
    """Decade bucket, e.g. 7 -> '0s', 24 -> '20s', 61 -> '60s'."""
    return f"{(int(age) // 10) * 10}s"


def convert_ml100k(src_dir: str, out_dir: str) -> str:
    """Write ratings.tsv, the three user feature files, item_genre.tsv, and
    dataset.json into out_dir. Returns the manifest path."""
    u_data = _require(os.path.join(src_dir, "u.data"))
    u_user = _require(os.path.join(src_dir, "u.user"))
    u_item = _require(os.path.join(src_dir, "u.item"))
    os.makedirs(out_dir, exist_ok=True)

    with open(u_data, encoding="latin-1") as f, \
            open(os.path.join(out_dir, "ratings.tsv"), "w", encoding="utf-8") as out:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{u_data} line {lineno}: expected 4 fields")
            out.write("\t".join(parts) + "\n")

    with open(u_user, encoding="latin-1") as f, \
            open(os.path.join(out_dir, "user_gender.tsv"), "w", encoding="utf-8") as g, \
            open(os.path.join(out_dir, "user_age.tsv"), "w", encoding="utf-8") as a, \
            open(os.path.join(out_dir, "user_occupation.tsv"), "w", encoding="utf-8") as o:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 5:
                raise ParseError(f"{u_user} line {lineno}: expected 5 fields")
            uid, age, gender, occupation, _zip = parts
            g.write(f"{uid}\t{gender}\n")
            a.write(f"{uid}\t{age_bucket(int(age))}\n")
            o.write(f"{uid}\t{occupation}\n")

    genres = _read_genres(src_dir)
    with open(u_item, encoding="latin-1") as f, \
            open(os.path.join(out_dir, "item_genre.tsv"), "w", encoding="utf-8") as out:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 5 + len(genres):
                raise ParseError(f"{u_item} line {lineno}: expected "
                                 f"{5 + len(genres)} fields, got {len(parts)}")
            iid = parts[0]
            flags = parts[5:]
            # The literal "unknown" column maps to the reserved unknown slot
            # by emitting no token at all.
            names = [genres[j] for j, flag in enumerate(flags)
                     if flag == "1" and genres[j] != "unknown"]
            out.write(f"{iid}\t{'|'.join(names)}\n")

    manifest = {
        "ratings": "ratings.tsv",
        "min_ratings": 5,
        "tag_top_t": 50,
        "features": [
            {"field": "gender", "owner": "user", "path": "user_gender.tsv",
             "open": False},
            {"field": "age", "owner": "user", "path": "user_age.tsv",
             "open": False},
            {"field": "occupation", "owner": "user", "path": "user_occupation.tsv",
             "open": False},
            {"field": "genre", "owner": "item", "path": "item_genre.tsv",
             "open": False},
        ],
    }
    manifest_path = os.path.join(out_dir, "dataset.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path
