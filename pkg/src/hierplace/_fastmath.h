/* Branch-free float32 exp/tanh/sigmoid and the loops that use them.
 *
 * Written so gcc can vectorise every loop (no libm calls, selects instead of
 * branches).  exp uses Cody-Waite range reduction and the Cephes degree-5
 * polynomial; max relative error is about 2 ulp over the clamped range.
 */
#ifndef HIERPLACE_FASTMATH_H
#define HIERPLACE_FASTMATH_H

#include <math.h>
#include <stdint.h>
#include <stddef.h>

#if defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__)
#define HP_CLONES __attribute__((target_clones("avx2", "default")))
#else
#define HP_CLONES
#endif

typedef union { float f; int32_t i; } hp_bits;

static inline float hp_expf(float x)
{
    const float round_magic = 12582912.0f; /* 1.5 * 2^23 */
    x = x < -87.0f ? -87.0f : x;
    x = x > 88.0f ? 88.0f : x;
    float n = (x * 1.44269504088896341f + round_magic) - round_magic;
    float r = x - n * 0.693359375f;
    r = r - n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    hp_bits s;
    s.i = ((int32_t)n + 127) << 23;
    return p * s.f;
}

static inline float hp_sigmoidf(float x)
{
    return 1.0f / (1.0f + hp_expf(-x));
}

static inline float hp_tanhf(float x)
{
    float big = 1.0f - 2.0f / (1.0f + hp_expf(2.0f * x));
    float x2 = x * x;
    float small = x * (1.0f + x2 * (-0.33333333f + x2 * 0.13333333f));
    return (x2 < 0.0036f) ? small : big;  /* |x| < 0.06 */
}

HP_CLONES
static void hp_lstm_forward_f(float *z, const float *c_prev, float *c, float *tc,
                              float *h, ptrdiff_t B, ptrdiff_t H)
{
    for (ptrdiff_t b = 0; b < B; ++b) {
        float *zb = z + b * 4 * H;
        const float *cp = c_prev + b * H;
        float *cb = c + b * H, *tb = tc + b * H, *hb = h + b * H;
        for (ptrdiff_t k = 0; k < 2 * H; ++k)
            zb[k] = hp_sigmoidf(zb[k]);
        for (ptrdiff_t k = 2 * H; k < 3 * H; ++k)
            zb[k] = hp_tanhf(zb[k]);
        for (ptrdiff_t k = 3 * H; k < 4 * H; ++k)
            zb[k] = hp_sigmoidf(zb[k]);
        for (ptrdiff_t k = 0; k < H; ++k) {
            float cc = zb[H + k] * cp[k] + zb[k] * zb[2 * H + k];
            float t = hp_tanhf(cc);
            cb[k] = cc;
            tb[k] = t;
            hb[k] = zb[3 * H + k] * t;
        }
    }
}

/* One softmax cross-entropy row.  Returns -log p[t].  The row is overwritten:
 * with want_grad it holds (p - onehot(t)) * scale, otherwise exp(row - max). */
HP_CLONES
static double hp_softmax_row_f(float *row, ptrdiff_t V, ptrdiff_t t, double scale, int want_grad)
{
    float lanes[8];
    float target = row[t];
    ptrdiff_t v = 0;
    for (int j = 0; j < 8; ++j)
        lanes[j] = row[0];
    for (; v + 8 <= V; v += 8)
        for (int j = 0; j < 8; ++j)
            lanes[j] = lanes[j] > row[v + j] ? lanes[j] : row[v + j];
    float m = lanes[0];
    for (int j = 1; j < 8; ++j)
        m = m > lanes[j] ? m : lanes[j];
    for (; v < V; ++v)
        m = m > row[v] ? m : row[v];

    for (v = 0; v < V; ++v)
        row[v] = hp_expf(row[v] - m);

    double acc[4] = {0.0, 0.0, 0.0, 0.0};
    for (v = 0; v + 4 <= V; v += 4)
        for (int j = 0; j < 4; ++j)
            acc[j] += (double)row[v + j];
    double s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (; v < V; ++v)
        s += (double)row[v];

    if (want_grad) {
        float f = (float)(scale / s);
        for (v = 0; v < V; ++v)
            row[v] *= f;
        row[t] -= (float)scale;
    }
    return log(s) + (double)m - (double)target;
}

HP_CLONES
static void hp_adam_f(float *value, const float *grad, float *m, float *v, ptrdiff_t n,
                      float beta1, float one_m_beta1, float beta2, float one_m_beta2,
                      float step, float c2, float eps)
{
    for (ptrdiff_t i = 0; i < n; ++i) {
        float g = grad[i];
        float mi = beta1 * m[i] + one_m_beta1 * g;
        float vi = beta2 * v[i] + one_m_beta2 * (g * g);
        m[i] = mi;
        v[i] = vi;
        value[i] -= (step * mi) / (sqrtf(vi / c2) + eps);
    }
}

static void hp_adam_d(double *value, const double *grad, double *m, double *v, ptrdiff_t n,
                      double beta1, double one_m_beta1, double beta2, double one_m_beta2,
                      double step, double c2, double eps)
{
    for (ptrdiff_t i = 0; i < n; ++i) {
        double g = grad[i];
        double mi = beta1 * m[i] + one_m_beta1 * g;
        double vi = beta2 * v[i] + one_m_beta2 * (g * g);
        m[i] = mi;
        v[i] = vi;
        value[i] -= (step * mi) / (sqrt(vi / c2) + eps);
    }
}

#endif
