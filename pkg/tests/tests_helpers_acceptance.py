import torch

from lvmgp.diffcore import MlpSpec, ParamStore, make_generator
from lvmgp.encoder import EncoderNets, encoder_init


def make_encoder_pair(dz=3, seed=0, conf_bias=None):
    nets = EncoderNets(dz,
                       conf=MlpSpec(1, dz, width=8, depth=1, out="sigmoid"),
                       feat=MlpSpec(1, dz, width=8, depth=1))
    store = ParamStore()
    encoder_init(store, nets, make_generator(seed, "enc"))
    if conf_bias is not None:
        with torch.no_grad():
            store["enc.conf.W1"].zero_()
            store["enc.conf.b1"].fill_(conf_bias)
    return nets, store
