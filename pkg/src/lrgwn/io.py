"""Bit-exact array (de)serialization as hex-encoded IEEE-754 doubles."""

import numpy as np


def encode_array(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(x).hex() for x in a.ravel()]}


def decode_array(doc):
    data = np.array([float.fromhex(x) for x in doc["data"]], dtype=np.float64)
    return data.reshape(doc["shape"])
