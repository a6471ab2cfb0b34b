import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from app.services.energy import PotentialPath
from app.services.errors import DomainError, HessianLabError
from app.services.torusfield import PotentialField, TorusBackground

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class FieldStore:
    """
    On-disk store for one experiment's artifacts.

    - Fields: self-describing .npz (raw data + JSON metadata with grid, omega, role, k)
    - Paths: stacked samples + times in one .npz
    - Tables: CSV with a fixed column order
    - Reports: JSON (pydantic models or plain dicts)

    Every write is recorded in `artifacts` so the run manifest can list it.
    """

    def __init__(self, root: Union[str, Path]) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifacts: List[str] = []

    def _target(self, name: str, suffix: str) -> Path:
        path = self.root / name
        if path.suffix != suffix:
            path = path.with_suffix(suffix)
        self.artifacts.append(path.name)
        return path

    # ---------- Public: Metadata ----------

    @staticmethod
    def _background_from(meta: Dict[str, Any]) -> TorusBackground:
        grid = meta["background"]
        omega = np.array(grid["omega_real"]) + 1j * np.array(grid["omega_imag"])
        return TorusBackground(n=grid["n"], N=grid["N"], collapse_imag=grid["collapse_imag"], omega=omega)

    @staticmethod
    def _meta(background: TorusBackground, **extra: Any) -> Dict[str, Any]:
        return {"format_version": FORMAT_VERSION, "background": background.describe(), **extra}

    # ---------- Public: Write APIs ----------

    def save_field(self, name: str, field: PotentialField, **extra: Any) -> Path:
        """Field container: `data` array plus a JSON `meta` string."""
        path = self._target(name, ".npz")
        meta = self._meta(field.background, kind="field", role=field.role, **extra)
        np.savez(path, data=field.data, meta=np.array(json.dumps(meta)))
        logger.info(f"✅ Saved field {path.name} ({field.role}, shape {field.data.shape})")
        return path

    def save_path(self, name: str, path_obj: PotentialPath, **extra: Any) -> Path:
        path = self._target(name, ".npz")
        meta = self._meta(path_obj.background, kind="path", **extra)
        stack = np.stack([s.data for s in path_obj.samples])
        np.savez(path, samples=stack, times=path_obj.times, meta=np.array(json.dumps(meta)))
        logger.info(f"✅ Saved path {path.name} ({len(path_obj)} samples)")
        return path

    def write_json(self, name: str, payload: Union[BaseModel, Dict[str, Any], List[Any]]) -> Path:
        path = self._target(name, ".json")
        if isinstance(payload, BaseModel):
            text = payload.model_dump_json(indent=2)
        else:
            text = json.dumps(payload, indent=2, default=_json_default)
        path.write_text(text + "\n")
        return path

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """CSV with the given column order; floats use repr so reruns are byte-identical."""
        path = self._target(name, ".csv")
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        logger.info(f"✅ Wrote table {path.name}")
        return path

    def write_models_csv(self, name: str, models: Sequence[BaseModel], header: Optional[Sequence[str]] = None) -> Path:
        if header is None:
            if not models:
                raise DomainError("cannot infer CSV columns from an empty table")
            header = list(type(models[0]).model_fields)
        return self.write_csv(name, header, ([getattr(m, c) for c in header] for m in models))

    def export_slice_csv(self, name: str, field: PotentialField, axes: Tuple[int, int] = (0, 2)) -> Path:
        """2D slice through index 0 of every other axis; rows are axes[0], columns axes[1]."""
        data = field.data
        if len(set(axes)) != 2 or any(not 0 <= a < data.ndim for a in axes):
            raise DomainError(f"invalid slice axes {axes} for a {data.ndim}-axis field")
        index = [0] * data.ndim
        for a in axes:
            index[a] = slice(None)
        plane = data[tuple(index)]
        if axes[0] > axes[1]:
            plane = plane.T
        header = ["row"] + [str(j) for j in range(plane.shape[1])]
        return self.write_csv(name, header, ([i] + list(plane[i]) for i in range(plane.shape[0])))

    # ---------- Public: Read APIs ----------

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple[Union[PotentialField, PotentialPath], Dict[str, Any]]:
        """Load a field or path container written by this store."""
        path = Path(path)
        if not path.exists():
            raise HessianLabError(f"artifact not found: {path}")
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive["meta"]))
            background = cls._background_from(meta)
            if meta.get("kind") == "path":
                samples = [PotentialField(background, s, "phi") for s in archive["samples"]]
                return PotentialPath(samples, archive["times"]), meta
            return PotentialField(background, archive["data"], meta.get("role", "generic")), meta


def field_statistics(field: PotentialField) -> Dict[str, Any]:
    data = field.data
    return {
        "role": field.role,
        "shape": list(data.shape),
        "min": field.inf,
        "max": field.sup,
        "mean": float(np.mean(data)),
        "sup_norm": field.sup_norm,
    }


def path_statistics(path: PotentialPath) -> Dict[str, Any]:
    return {
        "samples": len(path),
        "times": [float(t) for t in path.times],
        "sup_norms": [s.sup_norm for s in path.samples],
    }


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
