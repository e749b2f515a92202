# GVS - Generator versus Segmentor pseudo-healthy synthesis
