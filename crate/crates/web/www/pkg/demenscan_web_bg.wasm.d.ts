/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_addImage: (a: number, b: number, c: number) => [number, number, number];
export const demo_classNames: (a: number) => [number, number];
export const demo_featureMaps: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_filterGrid: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_galleryLabel: (a: number, b: number) => [number, number];
export const demo_galleryLen: (a: number) => number;
export const demo_imagePixels: (a: number, b: number) => [number, number, number, number];
export const demo_imageSize: (a: number) => number;
export const demo_new: (a: number) => [number, number, number];
export const demo_probabilities: (a: number, b: number) => [number, number, number, number];
export const demo_saliency: (a: number, b: number, c: number) => [number, number, number, number];
export const demo_trainEpochs: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
