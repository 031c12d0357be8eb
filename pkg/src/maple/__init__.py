"""Hierarchical multi-label image classification with label-graph refinement."""
from .hierarchy import LabelHierarchy, load_fixture, load_hierarchy
from .model import MapleModel, ModelConfig

__all__ = ["LabelHierarchy", "MapleModel", "ModelConfig", "load_fixture", "load_hierarchy"]
__version__ = "0.1.0"
