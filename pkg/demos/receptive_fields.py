"""Receptive-field geometry of ResNet34 and the input window of one neuron."""
from netscope import graph as G
from netscope import rf

model = G.build_resnet34(init=False)  # geometry does not need weights
print(rf.geometry_table(model))

field = rf.project(model, "stem.maxpool", (28, 28))
print(f"stem.maxpool (28,28) sees rows {field.top}..{field.bottom}, cols {field.left}..{field.right}")
