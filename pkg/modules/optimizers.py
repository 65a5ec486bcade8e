from app.optimizers import Adam, Adamax

OPTIMIZERS = {
    "adamax": (Adamax, {"beta1": 0.9, "beta2": 0.999, "eps": 1e-7}, "Adam with infinity-norm second moment"),
    "adam": (Adam, {"beta1": 0.9, "beta2": 0.999, "eps": 1e-7}, "Bias-corrected Adam"),
}
