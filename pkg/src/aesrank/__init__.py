"""Aesthetics ranking with rater-aware pair sampling, attribute and content branches."""

__version__ = "0.1.0"

ATTRIBUTE_NAMES = (
    "balancing_element",
    "interesting_content",
    "color_harmony",
    "shallow_depth_of_field",
    "good_lighting",
    "motion_blur",
    "object_emphasis",
    "rule_of_thirds",
    "vivid_color",
    "repetition",
    "symmetry",
)
N_ATTRIBUTES = len(ATTRIBUTE_NAMES)
