"""Image-based table recognition: structure, cell boxes and cell contents.

One shared convolutional encoder and one shared transformer decoder feed
three task heads (structure tokens, cell bounding boxes, cell content
characters); everything trains end-to-end on a taped numpy autodiff engine.
The package also ships the HTML token vocabularies, a deterministic
synthetic table generator, tree-edit-distance / mAP evaluation, and a CLI.
"""

__version__ = "0.1.0"
