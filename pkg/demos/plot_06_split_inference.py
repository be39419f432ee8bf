"""
Split inference over TCP
========================

The client runs the encoder and sends packed indices; the server rebuilds
the values and runs the decoder.  Floating-point features never leave the
client.
"""

import numpy as np

from splitquant.splitnet import LoopbackServer, SessionConfig, SplitClient, Tcp, serve
from splitquant.training import forward_split, init_autoencoder

enc, dec = init_autoencoder(8, 4, seed=0)
x = np.random.default_rng(0).standard_normal((5, 8))

cfg = SessionConfig(K=4, transport=Tcp("127.0.0.1", 0))
with serve(cfg, dec) as server:
    print("server on %s:%d" % server.address)
    with SplitClient(cfg, enc, server.connect()) as client:
        y_tcp = client.infer(x)
        print(client.log.to_text())
    print("server saw:", [t.name for t in server.sessions[0].received_types])

###############################################################################
# The in-process loopback transport and a plain forward pass agree bit for bit
lb_cfg = SessionConfig(K=4)
with SplitClient(lb_cfg, enc, LoopbackServer(lb_cfg, dec).connect()) as client:
    y_loop = client.infer(x)
y_local, _ = forward_split(x, enc, dec, lb_cfg.quantizer)
print("tcp == loopback == local:", y_tcp.tobytes() == y_loop.tobytes() == y_local.tobytes())
