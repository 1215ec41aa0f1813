# Toy segmentation model, trainer and checkpoints
