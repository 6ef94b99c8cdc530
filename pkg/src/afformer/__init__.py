"""Video-to-image affordance grounding."""
