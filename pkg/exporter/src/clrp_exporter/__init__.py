"""Torch-to-container exporter and fixture dataset builder."""

from .export import ExportError, ExportResult, convert_layers, export_model
from .fixture import (FixtureError, FixtureSpec, build_composites,
                      build_network, make_fixture, train_network)
from .glyphs import CLASS_NAMES, NUM_CLASSES, draw_glyph, glyph_mask

__version__ = "0.1.0"
