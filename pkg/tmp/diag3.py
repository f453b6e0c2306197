import numpy as np
from soundpatch.config import MelConfig
from soundpatch import dsp
from soundpatch.textures import render_texture
from soundpatch.oracle import oracle_classify

cfg = MelConfig()
wav0 = render_texture(1, 0.6, 1.04, seed=3)  # hum
mel = dsp.wav_to_mel(wav0, cfg)
wav1, errs = dsp.mel_to_wav(mel, n_iters=32, cfg=cfg, return_errors=True)
print("GL errors:", [round(e,3) for e in errs[::8]], "final", round(errs[-1],4))
print("orig max amp", np.abs(wav0).max(), "recon max amp", np.abs(wav1).max())
n = len(wav1)
seg = lambda a, s, e: float(np.abs(a[s:e]).max())
print("recon |x| profile: [0:512]", seg(wav1,0,512), "[512:1024]", seg(wav1,512,1024), "mid", seg(wav1, n//2-256, n//2+256), "[-512:]", seg(wav1,n-512,n))
print("probs with edges:", np.round(oracle_classify(wav1,4),3))
print("probs trim 512:", np.round(oracle_classify(wav1[512:-512],4),3))
# norm profile
win = dsp._window(cfg)
t = mel.values.shape[0]
norm = np.zeros((t-1)*cfg.hop_length + cfg.win_length)
for i in range(t):
    norm[i*cfg.hop_length:i*cfg.hop_length+cfg.win_length] += win**2
print("norm[0:8]", norm[:8].round(5), "norm[160:168]", norm[160:168].round(3), "norm mid", norm[5000].round(3))
