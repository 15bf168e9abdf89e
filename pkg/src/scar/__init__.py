"""Graph collaborative filtering with behavior-driven pseudo-interaction augmentation.

The package trains a linear graph-convolutional recommender on an implicit
feedback bipartite graph and augments each training epoch with two kinds of
pseudo-interaction views: edge addition (top scoring non-interacted items per
sampled user) and edge replacement (swap a sampled user's weakest interaction
for the most behaviorally similar unseen item). Augmented views feed a
contrastive objective next to the main ranking loss.
"""

__version__ = "0.1.0"
