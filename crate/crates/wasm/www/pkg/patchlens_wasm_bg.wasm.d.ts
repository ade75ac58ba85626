/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_explorer_free: (a: number, b: number) => void;
export const explorer_ask_image: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const explorer_ask_text: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const explorer_draw_scene: (a: number, b: bigint, c: number) => [number, number, number, number];
export const explorer_heatmap_png: (a: number, b: number, c: number) => [number, number, number, number];
export const explorer_layers: (a: number) => number;
export const explorer_new: () => [number, number, number];
export const explorer_probe_cell: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const explorer_scene_png: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
