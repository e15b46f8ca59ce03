# Regenerates special_oracle.json with mpmath at 50 significant digits.
import json
import mpmath as mp

mp.mp.dps = 50
n = 200
lo, hi = mp.mpf("0.05"), mp.mpf("1e6")
rows = []
for i in range(n):
    x = lo * (hi / lo) ** (mp.mpf(i) / (n - 1))
    x = float(x)
    xm = mp.mpf(x)
    rows.append({
        "x": x,
        "lgamma": float(mp.loggamma(xm)),
        "digamma": float(mp.digamma(xm)),
        "trigamma": float(mp.polygamma(1, xm)),
    })

p = lambda t: 6 * t * (1 - t)  # Beta(2,2) density
kl = mp.quad(lambda t: p(t) * mp.log(p(t)), [0, 0.5, 1])
out = {"grid": rows, "kl_beta22_beta11": float(kl)}
with open(__file__.replace("gen_special_oracle.py", "special_oracle.json"), "w") as f:
    json.dump(out, f, indent=1)
print(float(kl))
