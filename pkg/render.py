"""
Slice renderings of zone maps and occlusion heatmaps over FLAIR
"""

import logging
import os

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from errors import SizeError
from voxelgrid import VoxelGrid, Zone

log = logging.getLogger('render')

# Slicing axis for each view
VIEW_AXES = {'axial': 0, 'coronal': 1, 'sagittal': 2}

ZONE_COLORS = {
    Zone.LOW: (0, 200, 0),        # Green
    Zone.MEDIUM: (255, 255, 0),   # Yellow
    Zone.HIGH: (255, 0, 0),       # Red
}
ZONE_NAMES = {Zone.LOW: 'low', Zone.MEDIUM: 'medium', Zone.HIGH: 'high'}
ZONE_ALPHA = 0.5
HEAT_ALPHA = 0.6

FONT_PATHS = [
    '/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf',
    '/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf',
]


def _load_font(size):
    for path in FONT_PATHS:
        if os.path.exists(path):
            try:
                return ImageFont.truetype(path, size=size)
            except OSError:
                break
    return ImageFont.load_default()


def _array(grid):
    return np.asarray(grid.data if isinstance(grid, VoxelGrid) else grid)


def take_slice(grid, view='axial', index=None):
    """2D slice of a grid; index defaults to the middle of the view axis"""
    data = _array(grid)
    axis = VIEW_AXES[view]
    if index is None:
        index = data.shape[axis] // 2
    if not 0 <= index < data.shape[axis]:
        raise SizeError(f'slice {index} is outside 0..{data.shape[axis] - 1} along the {view} axis')
    return np.take(data, index, axis=axis)


def _grey(flair_slice):
    values = flair_slice[flair_slice != 0]
    top = float(np.percentile(values, 99)) if values.size else 1.0
    top = top if top > 0 else 1.0
    grey = np.clip(flair_slice / top, 0.0, 1.0) * 255.0
    return np.repeat(grey[..., None], 3, axis=2)


def _to_image(rgb, scale):
    image = Image.fromarray(np.round(rgb).astype(np.uint8))
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)
    return image


def render_zone_slice(flair, zones, view='axial', index=None, scale=4, legend=True):
    """
    Zone colours blended over a grey FLAIR slice

    Returns:
        PIL RGB image
    """
    base = _grey(take_slice(flair, view, index).astype(np.float64))
    labels = take_slice(zones, view, index)
    if labels.shape != base.shape[:2]:
        raise SizeError(f'zone slice {labels.shape} does not match FLAIR slice {base.shape[:2]}')
    rgb = base.copy()
    for zone, color in ZONE_COLORS.items():
        where = labels == zone
        rgb[where] = (1.0 - ZONE_ALPHA) * base[where] + ZONE_ALPHA * np.asarray(color, dtype=np.float64)
    image = _to_image(rgb, scale)
    if legend:
        draw = ImageDraw.Draw(image)
        font = _load_font(max(8, image.height // 24))
        y = 2
        for zone, color in ZONE_COLORS.items():
            draw.text((2, y), ZONE_NAMES[zone], fill=color, font=font)
            y += max(10, image.height // 20)
    return image


def heat_colors(heat):
    """Black-red-yellow-white ramp for values in [0, 1]"""
    h = np.clip(heat, 0.0, 1.0)[..., None]
    ramp = np.concatenate([np.clip(3 * h, 0, 1), np.clip(3 * h - 1, 0, 1), np.clip(3 * h - 2, 0, 1)], axis=2)
    return ramp * 255.0


def render_heatmap_slice(flair, heatmap, view='axial', index=None, scale=4):
    """Occlusion sensitivity blended over a grey FLAIR slice, opacity rising with sensitivity"""
    base = _grey(take_slice(flair, view, index).astype(np.float64))
    heat = take_slice(heatmap, view, index).astype(np.float64)
    if heat.shape != base.shape[:2]:
        raise SizeError(f'heatmap slice {heat.shape} does not match FLAIR slice {base.shape[:2]}')
    alpha = HEAT_ALPHA * np.clip(heat, 0.0, 1.0)[..., None]
    rgb = (1.0 - alpha) * base + alpha * heat_colors(heat)
    return _to_image(rgb, scale)


def save_png(image, path):
    try:
        image.save(path, format='PNG')
    except OSError as e:
        raise OSError(f'could not write {path}: {e}') from e
    log.debug('Wrote %s', path)
