"""Mask-guided style transfer and tensor features for dermoscopic lesions.

The package is organized as a small numpy library:

- ``ops``       dense tensor primitives (conv/relu/pool forward+backward, Adam)
- ``vgg``       the fixed VGG19 feature graph and its binary weight format
- ``image``     raster preprocessing (resize, median filter, hair removal,
                Shades of Gray, content-image construction)
- ``masks``     lesion mask generation, cleanup, and the pooled mask pyramid
- ``transfer``  guided style-transfer losses and the synthesis loop
- ``abcd``      classical ABCD lesion descriptors
- ``cp``        CP tensor decomposition (ALS) and test-set projection
- ``models``    elastic-net logistic regression, SVM, metrics, repeated CV
- ``pipeline``  stage orchestration with content-hash caching
- ``cli``       command-line entry points
"""

__version__ = "0.1.0"
