# GAPA core: frozen networks, activation caches, inducing sets, GP activations and variance propagation
