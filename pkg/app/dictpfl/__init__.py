"""DictPFL engine: decomposition, pruning, HE backends, round protocol and accounting."""
