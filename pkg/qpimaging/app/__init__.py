# qpimaging.app package
