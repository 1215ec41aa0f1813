# Test package for affinity-refine
