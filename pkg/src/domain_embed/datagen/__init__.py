from .backgrounds import BACKGROUND_SOURCES, TexturePatches
from .corpus import (
    DatasetManifest,
    DomainEntry,
    build_corpus,
    default_config,
    domain_grid,
    is_eval_example,
    load_domain,
    split_indices,
)
from .glyphs import FAMILIES, IdxGlyphs, ProceduralGlyphs, glyph_source, pad_to_canvas
from .render import (
    DomainSpec,
    RenderMode,
    apply_mode,
    blend_abs_diff,
    foreground_mask,
    luma,
    render_domain,
    to_rgb,
)
