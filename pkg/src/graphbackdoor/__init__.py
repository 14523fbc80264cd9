"""Backdoor attacks on graph neural networks with similarity-preserving triggers,
plus the pruning defenses and inductive evaluation used to measure them."""
from .graph import (UNLABELED, AttributedGraph, GraphError, NodeSet, Trigger,
                    attach_trigger, attach_triggers, cosine_similarity, normalized_adjacency)

__version__ = "0.1.0"

__all__ = ["UNLABELED", "AttributedGraph", "GraphError", "NodeSet", "Trigger", "attach_trigger",
           "attach_triggers", "cosine_similarity", "normalized_adjacency"]
