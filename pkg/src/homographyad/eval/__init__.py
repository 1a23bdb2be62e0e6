from .heatmap import heatmap_panel, normalize_map, render_heatmap
from .metrics import auroc, pixel_auroc
from .studies import (
    ExperimentResult,
    SelectionConfig,
    evaluate_condition,
    markdown_table,
    run_alignment_study,
    run_augmentation_study,
    run_backbone_study,
    run_hl_study,
)
