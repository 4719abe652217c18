# # Tuning only the last few encoder blocks
#
# The text encoder is a small pre-norm transformer.  A trainability mask
# freezes the first L - n blocks; the final LayerNorm always trains and the
# embedding tables never do.

from trace_head import encoder as enc

config = enc.EncoderConfig()
params = enc.init_encoder(config, seed=0)

for n in range(config.num_layers + 1):
    mask = enc.freeze_mask(config, n)
    total, trainable = enc.count_params(params, mask)
    print(f"n={n}  trainable {trainable:>7,d} of {total:,d}")

# Word order matters because positions are embedded, and padding does not
# because attention and pooling ignore padded slots.

a = enc.encode_text(params, "a b").data
b = enc.encode_text(params, "b a").data
print("order changes the vector:", not (a == b).all())

ids = enc.tokenize("padding does not matter")
plain = enc.encode(params, ids).data
padded = enc.encode(params, ids + [enc.PAD_ID] * 5).data
print("max difference with padding:", abs(plain - padded).max())
