# Affinity and label reassign losses with analytic gradients
