"""Sequential autoencoding of neural network weights.

Subpackages and modules, bottom-up: ``numerics`` (autodiff engine),
``zoo`` (base-model populations), ``tokenizer``, ``align``, ``autoencoder``,
``embed``, ``analyze``, ``sample`` and the ``cli`` front end.
"""

__version__ = "0.1.0"
