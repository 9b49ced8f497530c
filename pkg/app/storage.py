"""File formats: JSON polygons/specs/chains, CSV clouds, PGM rasters and SVG renders"""
import csv
import json
import logging
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from app.config import settings
from app.errors import ConfigError, DimensionError, ImageFormatError
from app.models import ChainRecord, ChainSummary, PolygonModel, ShapeSpecModel, parse_model
from app.services.curves import ControlPolygon, sample_curve
from app.services.images import GrayImage, OrientedPointCloud
from app.services.shape_process import ShapeTrajectory

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CURVE_COLORS = ("#1f4e9c", "#b8342b", "#2b8a3e", "#8f5bb5", "#c27c0e")
CONTROL_COLOR = "#b0b0b0"
POINT_COLOR = "#444444"


class Storage:
    """Reads and writes every artifact of a run"""

    def __init__(self, root: Optional[Path] = None):
        self.root = Path(root) if root is not None else settings.get_output_dir()

    def run_dir(self, out: Optional[PathLike] = None) -> Path:
        """Create and return an output directory"""
        path = Path(out) if out is not None else self.root
        path.mkdir(parents=True, exist_ok=True)
        return path

    # JSON

    def read_json(self, path: PathLike) -> Any:
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from e

    def write_json(self, path: PathLike, data: Any) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
        return path

    def load_polygon(self, path: PathLike) -> ControlPolygon:
        return parse_model(PolygonModel, self.read_json(path)).to_polygon()

    def save_polygon(self, path: PathLike, polygon: ControlPolygon) -> Path:
        return self.write_json(path, polygon.to_dict())

    def load_spec(self, path: PathLike) -> ShapeSpecModel:
        return parse_model(ShapeSpecModel, self.read_json(path))

    def save_trajectory(self, path: PathLike, trajectory: ShapeTrajectory) -> Path:
        return self.write_json(path, trajectory.to_dict())

    def save_summary(self, path: PathLike, summary: ChainSummary) -> Path:
        return self.write_json(path, summary.model_dump())

    # JSON lines

    def write_chain(self, path: PathLike, records: Iterable[ChainRecord]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in records:
                f.write(record.model_dump_json() + "\n")
        return path

    def read_chain(self, path: PathLike) -> List[ChainRecord]:
        with open(path, "r", encoding="utf-8") as f:
            return [ChainRecord.model_validate_json(line) for line in f if line.strip()]

    # CSV

    def load_cloud(self, path: PathLike) -> OrientedPointCloud:
        """Cloud CSV with header x,y and optional omega/theta columns"""
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            fields = [name.strip().lower() for name in (reader.fieldnames or [])]
            if "x" not in fields or "y" not in fields:
                raise ConfigError(f"{path} needs an x,y header, got {fields}", field="cloud")
            rows = [{k.strip().lower(): v for k, v in row.items()} for row in reader]
        try:
            points = np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
            omega = np.array([float(r["omega"]) for r in rows]) if "omega" in fields else None
            theta = np.array([float(r["theta"]) for r in rows]) if "theta" in fields else None
        except (TypeError, ValueError) as e:
            raise ConfigError(f"non-numeric entry in {path}: {e}", field="cloud") from e
        return OrientedPointCloud(points=points, omega=omega, theta=theta)

    def save_cloud(self, path: PathLike, cloud: OrientedPointCloud) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = ["x", "y"]
        columns = [cloud.points[:, 0], cloud.points[:, 1]]
        if cloud.omega is not None:
            header.append("omega")
            columns.append(cloud.omega)
        if cloud.theta is not None:
            header.append("theta")
            columns.append(cloud.theta)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(zip(*[c.tolist() for c in columns]))
        return path

    def save_samples(self, path: PathLike, polygon: ControlPolygon, count: int) -> Path:
        """Curve sample table with header t,x,y"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["t", "x", "y"])
            writer.writerows(sample_curve(polygon, count).tolist())
        return path

    # PGM

    def load_pgm(self, path: PathLike) -> GrayImage:
        """8-bit binary (P5) or plain (P2) PGM"""
        try:
            with Image.open(path) as img:
                if img.format != "PPM" or img.mode != "L":
                    raise ImageFormatError(f"{path} is not an 8-bit PGM (format {img.format}, mode {img.mode})")
                pixels = np.asarray(img, dtype=float)
        except (UnidentifiedImageError, OSError, SyntaxError) as e:
            raise ImageFormatError(f"cannot read {path}: {e}") from e
        return GrayImage(pixels=pixels)

    def save_pgm(self, path: PathLike, image: GrayImage) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = np.clip(np.rint(image.pixels), 0, 255).astype(np.uint8)
        Image.fromarray(data).save(path, format="PPM")
        return path

    # SVG

    def render_svg(
        self,
        polygons: Sequence[ControlPolygon],
        samples: int = 512,
        points: Optional[np.ndarray] = None,
        show_control_points: bool = True,
    ) -> str:
        """Curves as closed paths in a y-up viewport, with pale control-point dots"""
        if not polygons:
            raise DimensionError("nothing to render")
        curves = [sample_curve(c, samples)[:, 1:] for c in polygons]
        extent = [np.vstack(curves)]
        if show_control_points:
            extent.extend(c.points for c in polygons)
        if points is not None and len(points):
            points = np.asarray(points, dtype=float).reshape(-1, 2)
            extent.append(points)
        everything = np.vstack(extent)
        lo, hi = everything.min(axis=0), everything.max(axis=0)
        span = float(max(np.max(hi - lo), 1e-9))
        margin = 0.05 * span
        width, height = hi - lo + 2 * margin

        svg = ET.Element(
            "svg",
            xmlns="http://www.w3.org/2000/svg",
            version="1.1",
            viewBox=f"{lo[0] - margin:.6g} {-(hi[1] + margin):.6g} {width:.6g} {height:.6g}",
        )
        # flip y so curve coordinates keep their mathematical orientation
        group = ET.SubElement(svg, "g", transform="scale(1,-1)")
        stroke = f"{0.004 * span:.4g}"
        dot = 0.008 * span

        if points is not None and len(points):
            layer = ET.SubElement(group, "g", {"class": "observations", "fill": POINT_COLOR})
            for x, y in points:
                ET.SubElement(layer, "circle", cx=f"{x:.6g}", cy=f"{y:.6g}", r=f"{0.6 * dot:.4g}")

        for idx, (polygon, curve) in enumerate(zip(polygons, curves)):
            color = CURVE_COLORS[idx % len(CURVE_COLORS)]
            ET.SubElement(
                group,
                "path",
                {
                    "class": "curve",
                    "fill": "none",
                    "stroke": color,
                    "stroke-width": stroke,
                    "d": _path_data(curve),
                },
            )
            if show_control_points:
                layer = ET.SubElement(group, "g", {"class": "control-points", "fill": CONTROL_COLOR, "opacity": "0.6"})
                for x, y in polygon.points:
                    ET.SubElement(layer, "circle", cx=f"{x:.6g}", cy=f"{y:.6g}", r=f"{dot:.4g}")

        return ET.tostring(svg, encoding="unicode")

    def save_svg(self, path: PathLike, svg: str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(svg, encoding="utf-8")
        return path


def _path_data(curve: np.ndarray) -> str:
    """M x0,y0 L x1,y1 ... Z"""
    coords = [f"{x:.6g},{y:.6g}" for x, y in curve]
    return " ".join(["M", coords[0], "L", *coords[1:], "Z"])


def curve_vertices(svg: str) -> List[np.ndarray]:
    """Parse the sampled curve vertices back out of a rendered SVG"""
    root = ET.fromstring(svg)
    curves = []
    for node in root.iter():
        if node.tag.endswith("path") and node.get("class") == "curve":
            pairs = [p.split(",") for p in node.get("d", "").split() if "," in p]
            curves.append(np.array([[float(x), float(y)] for x, y in pairs]))
    return curves


# Global storage instance
storage = Storage()
