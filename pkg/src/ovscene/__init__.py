"""Open-vocabulary scene graph generation toolkit: relation-head alignment and
retention losses, node matching, benchmark splits, recall evaluation and weak
supervision from captions or synthesized graphs."""

__version__ = "0.1.0"
