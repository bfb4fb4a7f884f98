"""Y-Net: three-branch hashing network for instance retrieval.

Backbone + R-MAC classification branch + FPN segmentation branch trained
under a coupled loss; core-node features aggregate into binary hash-codes
served through a Hamming-distance index.
"""

__version__ = "0.1.0"
