/* C interface to the SC-HVPPNet post-processing library. */
#ifndef SCHVPP_H
#define SCHVPP_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(SCHVPP_BUILDING_LIBRARY)
#    define SCHVPP_API __declspec(dllexport)
#  else
#    define SCHVPP_API __declspec(dllimport)
#  endif
#else
#  define SCHVPP_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum schvpp_status {
    SCHVPP_OK = 0,
    SCHVPP_ERR_INVALID_ARGUMENT = 1,
    SCHVPP_ERR_OUT_OF_RANGE = 2,
    SCHVPP_ERR_IO = 3,
    SCHVPP_ERR_FORMAT = 4,
    SCHVPP_ERR_DOMAIN = 5,
    SCHVPP_ERR_NUMERIC = 6,
    SCHVPP_ERR_INTERNAL = 7
} schvpp_status;

typedef struct schvpp_model schvpp_model;

/* Message of the last failed call on this thread; never NULL. */
SCHVPP_API const char* schvpp_last_error(void);
SCHVPP_API const char* schvpp_version(void);

/* Fresh model from key=value model settings (NULL or "" for defaults;
   "preset=desk" selects the small configuration). */
SCHVPP_API schvpp_status schvpp_model_create(const char* config_text, uint64_t seed, schvpp_model** out);
SCHVPP_API schvpp_status schvpp_model_load(const char* path, schvpp_model** out);
SCHVPP_API schvpp_status schvpp_model_save(const schvpp_model* model, const char* path);
SCHVPP_API void schvpp_model_free(schvpp_model* model);

/* Zeroes the reconstruction convolution so the model maps input to input. */
SCHVPP_API schvpp_status schvpp_model_zero_reconstruction(schvpp_model* model);
SCHVPP_API schvpp_status schvpp_model_parameter_count(const schvpp_model* model, size_t* out);
/* Writes the model settings as key=value lines; *len receives the length
   including the terminator. Call with buf == NULL to query it. */
SCHVPP_API schvpp_status schvpp_model_config(const schvpp_model* model, char* buf, size_t* len);
SCHVPP_API schvpp_status schvpp_model_set_threads(schvpp_model* model, unsigned threads);

/* Enhances one 8-bit 4:2:0 frame. Each buffer holds width*height luma
   bytes followed by two quarter-size chroma planes. */
SCHVPP_API schvpp_status schvpp_enhance_frame(const schvpp_model* model, const uint8_t* in, uint8_t* out,
                                              size_t width, size_t height, int qp);
/* Enhances every frame of a headerless 4:2:0 file. */
SCHVPP_API schvpp_status schvpp_enhance_file(const schvpp_model* model, const char* in_path, const char* out_path,
                                             size_t width, size_t height, int qp);

/* Trains from a key=value config file. seed >= 0 overrides the file's
   seed; deterministic != 0 forces the single-threaded data path. */
SCHVPP_API schvpp_status schvpp_train(const char* config_path, const char* manifest_path, const char* out_dir,
                                      int deterministic, int64_t seed);

/* Writes report.csv, bd_rate.csv and bd_rate_per_sequence.csv into out_dir. */
SCHVPP_API schvpp_status schvpp_evaluate(const schvpp_model* model, const char* manifest_path, const char* out_dir);

/* BD-rate (%) of test against anchor; arrays of n (bitrate, quality) pairs. */
SCHVPP_API schvpp_status schvpp_bd_rate(const double* anchor_rate, const double* anchor_quality, size_t anchor_n,
                                        const double* test_rate, const double* test_quality, size_t test_n,
                                        double* out_percent);
/* Same for two CSV files with header `bitrate,quality`. */
SCHVPP_API schvpp_status schvpp_bd_rate_files(const char* anchor_path, const char* test_path, double* out_percent);

#ifdef __cplusplus
}
#endif

#endif /* SCHVPP_H */
