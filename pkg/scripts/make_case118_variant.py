"""Derive the bundled ``case118_cc.m`` from MATPOWER's ``case118.m``.

MATPOWER's IEEE 118-bus file carries no MVA ratings and quadratic costs.
This script writes a variant usable by the linear-cost pipeline:

* gencost rows keep only the linear and constant coefficients;
* rateA is assigned by voltage level: 500 MVA for branches touching a
  345 kV bus or joining buses of different base kV (transformers),
  175 MVA for every other branch.

The rating rule is an assumption of this package, not published data.

    python scripts/make_case118_variant.py
"""

import re
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "ccsocopf" / "data"
HV_RATING = 500.0
LV_RATING = 175.0


def main() -> None:
    text = (DATA / "case118.m").read_text()

    bus_body = re.search(r"mpc\.bus = \[(.*?)\];", text, re.S).group(1)
    kv = {}
    for line in bus_body.strip().splitlines():
        vals = line.split(";")[0].split()
        kv[int(vals[0])] = float(vals[9])

    def branch_row(m):
        vals = m.group(0).rstrip(";").split()
        f, t = int(vals[0]), int(vals[1])
        hv = kv[f] == 345 or kv[t] == 345 or kv[f] != kv[t]
        vals[5] = f"{HV_RATING if hv else LV_RATING:g}"
        return "\t" + "\t".join(vals) + ";"

    def cost_row(m):
        vals = m.group(0).rstrip(";").split()
        c1, c0 = vals[-2], vals[-1]
        return "\t" + "\t".join(["2", "0", "0", "2", c1, c0]) + ";"

    def sub_table(name, fn, src):
        pat = re.compile(rf"(mpc\.{name} = \[)(.*?)(\];)", re.S)
        m = pat.search(src)
        rows = re.sub(r"^[ \t]*[^%\n \t][^\n]*;", fn, m.group(2), flags=re.M)
        return src[: m.start(2)] + rows + src[m.end(2):]

    out = sub_table("branch", branch_row, text)
    out = sub_table("gencost", cost_row, out)
    header = (
        "%CASE118_CC  IEEE 118-bus case with linear costs and assumed ratings.\n"
        "%   Generated by scripts/make_case118_variant.py from MATPOWER case118.m.\n"
        f"%   rateA: {HV_RATING:g} MVA for 345 kV branches and transformers,\n"
        f"%   {LV_RATING:g} MVA otherwise. gencost: linear term of the original.\n"
    )
    out = out.replace("function mpc = case118\n", "function mpc = case118_cc\n" + header, 1)
    (DATA / "case118_cc.m").write_text(out)
    print(f"wrote {DATA / 'case118_cc.m'}")


if __name__ == "__main__":
    main()
