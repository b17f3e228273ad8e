"""Multi-view mammography contrastive pretraining on a synthetic projection phantom.

The package generates CC/MLO view pairs from 3D phantoms with known ROI
geometry, preprocesses them (pectoral removal, AP alignment), trains small
visual/text encoders with global and local (patch-to-slice) contrastive
losses, and evaluates zero-shot / linear-probe / fine-tune performance plus
cross-view attention localization.
"""

__version__ = "0.1.0"
