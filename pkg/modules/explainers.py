from app.explain import lime_explain, shap_explain
from app.models import LimeConfig, ShapConfig

EXPLAINERS = {
    "lime": (lime_explain, LimeConfig, "local", "Weighted ridge surrogate over superpixel bits, outlined top segments"),
    "shap": (shap_explain, ShapConfig, "global", "KernelSHAP per class, exact up to 12 segments, heat overlay"),
}
