# Test helpers for affinity-refine
