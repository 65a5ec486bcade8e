# depth variant: (conv blocks, description)
ARCHITECTURES = {
    "shallow": (1, "One conv block: conv(f,3x3)+relu, pool"),
    "canonical": (2, "Two conv blocks, the 267,397-parameter reference network"),
    "deep": (3, "Three conv blocks, the third pool omitted when the feature map is too small"),
}
